use logomr::aggregator::Mode;
use logomr::encoder::EncoderConfig;
use logomr::model::{ModelConfig, PlaneModel};
use logomr::multiplane::TriPlaneModel;
use logomr::numerics::Tensor;
use logomr::synthcohort::{plan_classes, split_cohort, synthesize_exam, CohortConfig, ExamClass, SyntheticExam};
use logomr::trainer::{train, train_triplane, validation_cindex, Dataset, TrainConfig};
use logomr::volume::{AugmentPolicy, Plane, PseudoRgb, SliceBag, Volume};

fn cohort_config() -> CohortConfig {
    CohortConfig {
        exams: 36,
        dims: [16, 16, 16],
        frac_short: 0.3,
        frac_long: 0.2,
        frac_healthy: 0.4,
        frac_censored: 0.1,
        seed: 5,
        ..CohortConfig::default()
    }
}

fn model_config(mode: Mode) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            widths: vec![4, 8],
            kernel: 3,
        },
        layers: 1,
        heads: 2,
        ffn_dim: 16,
        horizons: 5,
        mode,
        gap: 2,
        target_dims: [16, 16, 16],
    }
}

fn exams(cfg: &CohortConfig) -> Vec<SyntheticExam> {
    plan_classes(cfg)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, c)| synthesize_exam(cfg, i, c).unwrap())
        .collect()
}

fn datasets() -> (Dataset, Dataset) {
    let cfg = cohort_config();
    let all = exams(&cfg);
    let records: Vec<_> = all.iter().map(|e| e.record.clone()).collect();
    let splits = split_cohort(&records, &[0.5, 0.5], cfg.seed).unwrap();
    let build = |split: &Vec<logomr::risk::ExamRecord>| {
        let vols: Vec<Volume> = split
            .iter()
            .map(|r| all.iter().find(|e| e.record.exam_id == r.exam_id).unwrap().volume.clone())
            .collect();
        Dataset::new(split.clone(), &vols, cfg.dims).unwrap()
    };
    (build(&splits[0]), build(&splits[1]))
}

fn train_config() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch: 3,
        max_epochs: 3,
        patience: 3,
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn planted_blobs_stand_out() {
    let cfg = CohortConfig {
        exams: 120,
        seed: 2,
        ..CohortConfig::default()
    };
    let mut seen = 0;
    for exam in exams(&cfg) {
        let Some(l) = exam.lesion else { continue };
        seen += 1;
        let v = &exam.volume;
        let [d, h, w] = v.dims();
        let (mut inside, mut n_in) = (0.0, 0);
        let (mut outside, mut n_out) = (0.0, 0);
        for i in 0..d {
            for j in 0..h {
                for k in 0..w {
                    let dy = j as f64 - l.center[1] as f64;
                    let dx = k as f64 - l.center[2] as f64;
                    let dz = i as f64 - l.center[0] as f64;
                    if dz == 0.0 && (dy * dy + dx * dx).sqrt() <= l.radius / 2.0 {
                        inside += v.get(i, j, k);
                        n_in += 1;
                    } else if dz.abs() > l.half_span as f64 || (dy * dy + dx * dx).sqrt() > 4.0 * l.radius {
                        outside += v.get(i, j, k);
                        n_out += 1;
                    }
                }
            }
        }
        let contrast = inside / n_in as f64 - outside / n_out as f64;
        assert!(contrast >= 3.0 * cfg.noise, "exam {}: contrast {contrast}", exam.record.exam_id);
    }
    assert!(seen > 20);
}

#[test]
fn classes_carry_their_cues() {
    let cfg = cohort_config();
    for e in exams(&cfg) {
        match e.class {
            ExamClass::Short(y) => {
                assert!(e.lesion.is_some() && e.texture.is_none());
                assert_eq!(e.record.event_year, y);
            }
            ExamClass::Long(y) => {
                assert!(e.lesion.is_none() && e.texture.is_some());
                assert!((3..=5).contains(&y));
            }
            ExamClass::Healthy => assert!((5.0..=8.0).contains(&e.record.followup_years)),
            ExamClass::Censored => assert!((1.0..5.0).contains(&e.record.followup_years)),
        }
    }
}

#[test]
fn zero_learning_rate_freezes_the_model() {
    let (tr, va) = datasets();
    let cfg = TrainConfig {
        lr: 0.0,
        patience: 1,
        ..train_config()
    };
    let initial = PlaneModel::new(&model_config(Mode::Logo), Plane::Axial, cfg.seed).unwrap();
    let out = train(&model_config(Mode::Logo), Plane::Axial, &cfg, &tr, &va).unwrap();
    assert_eq!(out.model.store(), initial.store());
    assert_eq!(out.log.len(), 2);
    assert_eq!(out.log[0].val_cindex, out.log[1].val_cindex);
    assert_eq!(out.best_epoch, 0);
}

#[test]
fn best_snapshot_is_returned_and_validation_is_clean() {
    let (tr, va) = datasets();
    let cfg = TrainConfig {
        augment: AugmentPolicy {
            flip: [0.5, 0.5, 0.5],
            max_shift: [2, 2, 2],
        },
        ..train_config()
    };
    let out = train(&model_config(Mode::Abmil), Plane::Axial, &cfg, &tr, &va).unwrap();
    let best = out.log.iter().map(|l| l.val_cindex).fold(f64::NEG_INFINITY, f64::max);
    let first_best = out.log.iter().find(|l| l.val_cindex == best).unwrap().epoch;
    assert_eq!(out.best_epoch, first_best);
    assert_eq!(validation_cindex(&out.model, &va).unwrap().to_bits(), best.to_bits());
    assert!(out.log[1..].iter().all(|l| l.train_loss.unwrap().is_finite()));
}

#[test]
fn tri_plane_training_is_reproducible_and_reuses_the_axial_run() {
    let (tr, va) = datasets();
    let mc = model_config(Mode::Logo);
    let cfg = TrainConfig {
        max_epochs: 1,
        ..train_config()
    };
    let a = train_triplane(&mc, &cfg, &tr, &va).unwrap();
    let b = train_triplane(&mc, &cfg, &tr, &va).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.logs.len(), 3);
    let axial = train(&mc, Plane::Axial, &cfg, &tr, &va).unwrap();
    assert_eq!(a.model.plane(Plane::Axial), &axial.model);
    let threaded = train_triplane(&mc, &TrainConfig { threads: 3, ..cfg }, &tr, &va).unwrap();
    assert_eq!(threaded.model, a.model);
}

#[test]
fn identical_planes_agree_on_symmetric_cubes() {
    let mc = ModelConfig {
        target_dims: [12, 12, 12],
        ..model_config(Mode::Logo)
    };
    let base = PlaneModel::new(&mc, Plane::Axial, 4).unwrap();
    let models = Plane::ALL
        .iter()
        .map(|&p| PlaneModel::from_store(&mc, p, base.store().clone()).unwrap())
        .collect();
    let tri = TriPlaneModel::from_planes(models).unwrap();
    let g = |x: usize| ((x * 7 % 12) as f64 * 0.37).sin();
    let cube = Volume::from_fn([12, 12, 12], |d, h, w| {
        let (a, b, c) = (g(d), g(h), g(w));
        a + b + c + a * b + b * c + c * a + a * b * c
    });
    let out = tri.forward(&cube).unwrap();
    for (_, plane_out) in &out.planes {
        for (a, b) in plane_out.p.iter().zip(&out.p) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn mean_and_abmil_agree_on_identical_slices() {
    let mc = model_config(Mode::Abmil);
    let abmil = PlaneModel::new(&mc, Plane::Axial, 9).unwrap();
    let mut mean = PlaneModel::new(&ModelConfig { mode: Mode::Mean, ..mc }, Plane::Axial, 9).unwrap();
    for (id, name, _) in mean.store().iter().map(|(i, n, t)| (i, n.to_string(), t.clone())).collect::<Vec<_>>() {
        let src = abmil.store().get(abmil.store().find(&name).unwrap()).clone();
        mean.store_mut().set(id, src).unwrap();
    }
    let slice = PseudoRgb {
        rows: 16,
        cols: 16,
        data: (0..768).map(|i| ((i * 13 % 29) as f64 - 14.0) / 9.0).collect(),
    };
    let bag = SliceBag::from_slices(Plane::Axial, 2, &vec![slice; 5]).unwrap();
    let (a, m) = (abmil.forward(&bag).unwrap(), mean.forward(&bag).unwrap());
    for (x, y) in a.p.iter().zip(&m.p) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn logo_tracks_slice_order() {
    let mc = model_config(Mode::Logo);
    let model = PlaneModel::new(&mc, Plane::Axial, 21).unwrap();
    let mk = |v: f64| PseudoRgb {
        rows: 16,
        cols: 16,
        data: (0..768).map(|i| v * ((i % 17) as f64 - 8.0) / 8.0).collect(),
    };
    let bag = SliceBag::from_slices(Plane::Axial, 2, &[mk(1.0), mk(-2.0), mk(1.0)]).unwrap();
    let swapped = bag.permuted(&[1, 0, 2]).unwrap();
    let (a, b) = (model.forward(&bag).unwrap(), model.forward(&swapped).unwrap());
    let diff = a.p.iter().zip(&b.p).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff > 1e-6, "{diff}");
    let zeroed = {
        let mut m = model.clone();
        let (w, _) = m.aggregator().head_params();
        let dims = m.store().get(w).dims().to_vec();
        m.store_mut().set(w, Tensor::zeros(&dims)).unwrap();
        m
    };
    assert_eq!(zeroed.forward(&bag).unwrap().p, zeroed.forward(&swapped).unwrap().p);
}
