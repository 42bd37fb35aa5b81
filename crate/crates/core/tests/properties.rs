use logomr::aggregator::Mode;
use logomr::encoder::EncoderConfig;
use logomr::metrics::{bootstrap_ci, c_index, count_flops, horizon_auc, SurvivalPoint};
use logomr::model::{ModelConfig, PlaneModel};
use logomr::multiplane::{ensemble, mip_project, saliency_map};
use logomr::numerics::{AdamConfig, AdamState, Gradients, Graph, ParamStore, Tensor};
use logomr::risk::{cumulative_risk, encode_label, masked_bce, ExamRecord, LabelVector};
use logomr::synthcohort::{plan_classes, split_cohort, CohortConfig, ExamClass};
use logomr::volume::{
    augment, flip, normalize_volume, reslice, restack, stack_neighbors, AugmentPolicy, Plane, PseudoRgb, SliceBag,
    Volume,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

const MODES: [Mode; 4] = [Mode::Logo, Mode::NoPe, Mode::Abmil, Mode::Mean];

fn small_volume() -> impl Strategy<Value = Volume> {
    (2usize..7, 2usize..7, 2usize..7).prop_flat_map(|(d, h, w)| {
        prop::collection::vec(-5.0f64..5.0, d * h * w).prop_map(move |v| Volume::new([d, h, w], v).unwrap())
    })
}

fn tiny_config(mode: Mode) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            widths: vec![4, 8],
            kernel: 3,
        },
        layers: 1,
        heads: 2,
        ffn_dim: 16,
        horizons: 3,
        mode,
        gap: 1,
        target_dims: [6, 8, 8],
    }
}

fn bag(len: usize, seed: u64) -> SliceBag {
    use rand::RngExt;
    let mut r = Xoshiro256PlusPlus::seed_from_u64(seed);
    let slices: Vec<PseudoRgb> = (0..len)
        .map(|_| PseudoRgb {
            rows: 8,
            cols: 8,
            data: (0..192).map(|_| r.random_range(-2.0..2.0)).collect(),
        })
        .collect();
    SliceBag::from_slices(Plane::Axial, 1, &slices).unwrap()
}

fn label_strategy(n: usize) -> impl Strategy<Value = (Vec<f64>, LabelVector)> {
    (
        prop::collection::vec(0.01f64..0.99, n),
        prop::collection::vec(any::<bool>(), n),
        prop::collection::vec(any::<bool>(), n),
    )
        .prop_filter("needs an observed position", |(_, _, m)| m.iter().any(|&b| b))
        .prop_map(|(p, y, m)| {
            let label = LabelVector {
                target: y.iter().map(|&b| f64::from(u8::from(b))).collect(),
                mask: m.iter().map(|&b| f64::from(u8::from(b))).collect(),
            };
            (p, label)
        })
}

fn survival_records() -> impl Strategy<Value = (Vec<ExamRecord>, Vec<f64>)> {
    prop::collection::vec((0u32..=5, 0.5f64..9.0, -3.0f64..3.0), 10..80).prop_map(|rows| {
        let records = rows
            .iter()
            .map(|&(y, f, _)| ExamRecord {
                exam_id: String::new(),
                patient_id: String::new(),
                volume_path: String::new(),
                event_year: y,
                followup_years: if y > 0 { f64::from(y) } else { f },
            })
            .collect();
        (records, rows.iter().map(|r| r.2).collect())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>()) {
        let t = Tensor::from_fn(&[rows, cols], |i| ((seed.wrapping_add(i as u64) % 1000) as f64 - 500.0) / 7.0);
        let mut g = Graph::new();
        let x = g.input(t).unwrap();
        let s = g.softmax(x, 1).unwrap();
        for row in g.value(s).data().chunks(cols) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    // Variance after normalization is s²/(s² + 1e-5): within 1e-8 of one
    // once the input variance reaches 1e3.
    #[test]
    fn layer_norm_standardizes_wide_rows(data in prop::collection::vec(-100.0f64..100.0, 16), scale in 1.0f64..3.0) {
        let data: Vec<f64> = data.iter().map(|v| v * scale).collect();
        let m = data.iter().sum::<f64>() / 16.0;
        let s2 = data.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 16.0;
        prop_assume!(s2 >= 1e3);
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 16], data).unwrap()).unwrap();
        let gamma = g.input(Tensor::full(&[16], 1.0)).unwrap();
        let beta = g.input(Tensor::zeros(&[16])).unwrap();
        let y = g.layer_norm(x, gamma, beta, 1).unwrap();
        let out = g.value(y).data();
        let mean = out.iter().sum::<f64>() / 16.0;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        prop_assert!(mean.abs() <= 1e-10);
        prop_assert!((var - 1.0).abs() <= 1e-8);
    }

    #[test]
    fn adam_ignores_zero_gradients(values in prop::collection::vec(-3.0f64..3.0, 1..20), lr in 1e-5f64..1e-1) {
        let mut store = ParamStore::new();
        let n = values.len();
        store.add("a", Tensor::new(vec![n], values.clone()).unwrap());
        store.add("b", Tensor::full(&[2], 0.5));
        let before = store.clone();
        let mut adam = AdamState::new(&store, AdamConfig::with_lr(lr));
        let zeros = Gradients::zeros_like(&store);
        adam.step(&mut store, &zeros).unwrap();
        prop_assert_eq!(&store, &before);

        let mut grads = Gradients::zeros_like(&store);
        let mut g = Graph::new();
        let a = g.param(&store, store.find("a").unwrap()).unwrap();
        let _b = g.param(&store, store.find("b").unwrap()).unwrap();
        let loss = g.sum(a).unwrap();
        grads.accumulate(&g.gradients(loss, &store).unwrap()).unwrap();
        adam.step(&mut store, &grads).unwrap();
        prop_assert_eq!(store.get(store.find("b").unwrap()), before.get(before.find("b").unwrap()));
        prop_assert!(store.get(store.find("a").unwrap()) != before.get(before.find("a").unwrap()));
    }

    #[test]
    fn reslice_restack_round_trip(v in small_volume()) {
        for plane in Plane::ALL {
            prop_assert_eq!(&restack(&reslice(&v, plane), plane).unwrap(), &v);
        }
    }

    #[test]
    fn neighbour_stack_centre_channel(v in small_volume(), gap in 0usize..8) {
        for plane in Plane::ALL {
            let slices = reslice(&v, plane);
            for i in 1..=slices.len() {
                let s = stack_neighbors(&slices, i, gap).unwrap();
                prop_assert_eq!(s.channel(1), &slices[i - 1].data[..]);
                if gap == 0 {
                    prop_assert_eq!(s.channel(0), s.channel(1));
                    prop_assert_eq!(s.channel(2), s.channel(1));
                }
            }
        }
    }

    #[test]
    fn flips_and_augmentation(v in small_volume(), seed in any::<u64>()) {
        for axis in 0..3 {
            prop_assert_eq!(&flip(&flip(&v, axis), axis), &v);
        }
        let policy = AugmentPolicy { flip: [0.5, 0.5, 0.5], max_shift: [1, 1, 1] };
        let a = augment(&v, &mut Xoshiro256PlusPlus::seed_from_u64(seed), &policy).unwrap();
        let b = augment(&v, &mut Xoshiro256PlusPlus::seed_from_u64(seed), &policy).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn normalization_moments(v in small_volume()) {
        let (_, std) = v.mean_std();
        prop_assume!(std > 1e-3);
        let z = normalize_volume(&v, v.dims()).unwrap();
        let (mean, std) = z.mean_std();
        prop_assert!(mean.abs() <= 1e-10);
        prop_assert!((std - 1.0).abs() <= 1e-8);
    }

    #[test]
    fn masked_positions_do_not_matter((p, label) in label_strategy(6), noise in prop::collection::vec(0.01f64..0.99, 6)) {
        let perturbed: Vec<f64> = p.iter().zip(&noise).zip(&label.mask).map(|((&a, &b), &m)| if m == 0.0 { b } else { a }).collect();
        prop_assert_eq!(masked_bce(&p, &label).unwrap().to_bits(), masked_bce(&perturbed, &label).unwrap().to_bits());
        let mut store = ParamStore::new();
        let logits = store.add("logits", Tensor::new(vec![1, 6], p.iter().map(|q| (q / (1.0 - q)).ln()).collect()).unwrap());
        let mut g = Graph::new();
        let z = g.param(&store, logits).unwrap();
        let pn = g.sigmoid(z).unwrap();
        let loss = g.masked_bce(pn, &label.target, &label.mask).unwrap();
        let grads = g.gradients(loss, &store).unwrap();
        for (gv, &m) in grads.get(logits).data().iter().zip(&label.mask) {
            if m == 0.0 {
                prop_assert_eq!(*gv, 0.0);
            }
        }
    }

    #[test]
    fn cumulative_risk_is_monotone(p in prop::collection::vec(0.0f64..1.0, 6)) {
        let risks: Vec<f64> = (1..6).map(|m| cumulative_risk(&p, m).unwrap()).collect();
        prop_assert!(risks.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(risks[4] <= 5.0);
    }

    #[test]
    fn labels_are_total_and_deterministic(year in 0u32..=5, follow in 0.0f64..10.0) {
        let r = ExamRecord {
            exam_id: String::new(),
            patient_id: String::new(),
            volume_path: String::new(),
            event_year: year,
            followup_years: if year > 0 { f64::from(year) + follow.fract() } else { follow },
        };
        let a = encode_label(&r, 5).unwrap();
        prop_assert_eq!(&a, &encode_label(&r, 5).unwrap());
        prop_assert_eq!(a.target.len(), 6);
        prop_assert!(a.target.iter().sum::<f64>() <= 1.0);
    }

    #[test]
    fn saliency_mass_and_sign(
        a in prop::collection::vec(0.0f64..1.0, 2..7),
        c in prop::collection::vec(0.0f64..1.0, 2..7),
        s in prop::collection::vec(0.0f64..1.0, 2..7),
    ) {
        let norm = |w: &Vec<f64>| {
            let t: f64 = w.iter().sum();
            w.iter().map(|x| x / t).collect::<Vec<f64>>()
        };
        prop_assume!([&a, &c, &s].iter().all(|w| w.iter().sum::<f64>() > 1e-6));
        let (a, c, s) = (norm(&a), norm(&c), norm(&s));
        let map = saliency_map(&a, &c, &s, [a.len(), c.len(), s.len()]).unwrap();
        prop_assert!((map.total() - 1.0).abs() <= 1e-9);
        prop_assert!(map.as_volume().voxels().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn ensemble_ignores_plane_order(ps in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 3)) {
        let forward = ensemble(&ps).unwrap();
        let backward = ensemble(&[ps[2].clone(), ps[0].clone(), ps[1].clone()]).unwrap();
        for (x, y) in forward.iter().zip(&backward) {
            prop_assert!((x - y).abs() <= 1e-15);
        }
    }

    #[test]
    fn mip_commutes_with_monotone_maps(v in small_volume(), a in 0.1f64..4.0, b in -3.0f64..3.0) {
        let mapped = Volume::new(v.dims(), v.voxels().iter().map(|x| a * x + b).collect()).unwrap();
        for axis in 0..3 {
            let (m1, m2) = (mip_project(&v, axis).unwrap(), mip_project(&mapped, axis).unwrap());
            for (x, y) in m1.data.iter().zip(&m2.data) {
                prop_assert!((a * x + b - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn auc_ignores_increasing_transforms((records, scores) in survival_records(), m in 1usize..=5) {
        let warped: Vec<f64> = scores.iter().map(|s| s.powi(3) * 2.0 + s.exp()).collect();
        match (horizon_auc(&records, &scores, m), horizon_auc(&records, &warped, m)) {
            (Ok(x), Ok(y)) => prop_assert_eq!(x, y),
            (Err(_), Err(_)) => {}
            (x, y) => prop_assert!(false, "{x:?} vs {y:?}"),
        }
    }

    #[test]
    fn bootstrap_point_ignores_resampling((records, scores) in survival_records(), seed in any::<u64>(), b in 1usize..30) {
        let pts: Vec<SurvivalPoint> = records.iter().zip(&scores).map(|(r, &s)| SurvivalPoint::from_record(r, s)).collect();
        prop_assume!(c_index(&pts).is_ok());
        let metric = |idx: &[usize]| c_index(&idx.iter().map(|&i| pts[i]).collect::<Vec<_>>());
        let r1 = bootstrap_ci("cindex", None, pts.len(), b, seed, metric).unwrap();
        let r2 = bootstrap_ci("cindex", None, pts.len(), 7, seed ^ 1, metric).unwrap();
        prop_assert_eq!(r1.point, r2.point);
        prop_assert_eq!(&r1, &bootstrap_ci("cindex", None, pts.len(), b, seed, metric).unwrap());
    }

    #[test]
    fn split_has_no_patient_leakage(exams in 6usize..60, per_patient in 1usize..4, seed in any::<u64>()) {
        let records: Vec<ExamRecord> = (0..exams)
            .map(|i| ExamRecord {
                exam_id: format!("E{i}"),
                patient_id: format!("P{}", i / per_patient),
                volume_path: String::new(),
                event_year: 0,
                followup_years: 5.0,
            })
            .collect();
        let patients = exams.div_ceil(per_patient);
        prop_assume!(patients >= 3);
        let splits = split_cohort(&records, &[0.5, 0.25, 0.25], seed).unwrap();
        prop_assert_eq!(splits.iter().map(Vec::len).sum::<usize>(), exams);
        for a in 0..3 {
            for b in a + 1..3 {
                for r in &splits[a] {
                    prop_assert!(splits[b].iter().all(|q| q.patient_id != r.patient_id));
                }
            }
        }
    }

    #[test]
    fn class_plan_follows_fractions(exams in 10usize..400, seed in any::<u64>()) {
        let cfg = CohortConfig { exams, seed, ..CohortConfig::default() };
        let plan = plan_classes(&cfg).unwrap();
        let short = plan.iter().filter(|c| matches!(c, ExamClass::Short(_))).count();
        let long = plan.iter().filter(|c| matches!(c, ExamClass::Long(_))).count();
        let healthy = plan.iter().filter(|c| matches!(c, ExamClass::Healthy)).count();
        let censored = plan.len() - short - long - healthy;
        for (count, frac) in [(short, cfg.frac_short), (long, cfg.frac_long), (healthy, cfg.frac_healthy), (censored, cfg.frac_censored)] {
            prop_assert!((count as f64 - frac * exams as f64).abs() < 1.0);
        }
    }

    #[test]
    fn encoder_flops_linear_in_slices(len in 8usize..40) {
        let cfg = tiny_config(Mode::Mean);
        let f = |d| count_flops(&cfg, [d, 16, 16], Plane::Axial);
        prop_assert_eq!(f(2 * len) - f(len), f(3 * len) - f(2 * len));
    }
}
proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn alpha_is_a_distribution(mode_code in 0u8..4, len in 1usize..7, seed in any::<u64>()) {
        let model = PlaneModel::new(&tiny_config(MODES[mode_code as usize]), Plane::Axial, seed).unwrap();
        let out = model.forward(&bag(len, seed)).unwrap();
        prop_assert_eq!(out.alpha.len(), len);
        prop_assert!(out.alpha.iter().all(|&a| a >= 0.0));
        prop_assert!((out.alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(out.p.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn forward_is_deterministic(mode_code in 0u8..4, seed in any::<u64>()) {
        let model = PlaneModel::new(&tiny_config(MODES[mode_code as usize]), Plane::Axial, seed).unwrap();
        let b = bag(4, seed);
        let label = LabelVector { target: vec![0.0, 1.0, 0.0, 0.0], mask: vec![1.0; 4] };
        let run = || {
            let mut g = Graph::new();
            let (loss, p) = model.loss_graph(&mut g, &b, &label).unwrap();
            (g.value(p).clone(), g.gradients(loss, model.store()).unwrap())
        };
        let ((p1, g1), (p2, g2)) = (run(), run());
        prop_assert_eq!(p1, p2);
        prop_assert_eq!(g1, g2);
    }

    #[test]
    fn order_free_modes_ignore_permutations(mode_code in 1u8..4, len in 2usize..7, seed in any::<u64>()) {
        let model = PlaneModel::new(&tiny_config(MODES[mode_code as usize]), Plane::Axial, seed).unwrap();
        let b = bag(len, seed);
        let order: Vec<usize> = (0..len).rev().collect();
        let (x, y) = (model.forward(&b).unwrap(), model.forward(&b.permuted(&order).unwrap()).unwrap());
        for (a, c) in x.p.iter().zip(&y.p) {
            prop_assert!((a - c).abs() <= 1e-9);
        }
    }
}
