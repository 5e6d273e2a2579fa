use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use semheat_core::align::AffineMap;
use semheat_core::concept::{eval_predicates, zero_shot, Mask};
use semheat_core::detect::{
    detect, evaluate, ClassProfile, DetectorMode, DetectorProfile, RuntimeSet, Verdict, PROFILE_SCHEMA,
};
use semheat_core::fault::{decide, localize, robustness_analysis, ErrorLocus, LocusCounts};
use semheat_core::heatmap::{summary_from_counts, SummaryKind};
use semheat_core::store::format::{decode_bundle, encode_bundle};
use semheat_core::store::{
    filter, filter_within, ConceptDictionary, DirectionKind, DirectionSet, EmbeddingBundle, PerturbationTag,
    SampleFilter, SampleMeta,
};
use semheat_core::Matrix;

const CASES: u32 = 1000;

fn names(prefix: &str, k: usize) -> Vec<String> {
    (0..k).map(|i| format!("{prefix}{i}")).collect()
}

fn fix_rows(m: &mut Matrix<f32>) {
    let d = m.cols();
    for i in 0..m.rows() {
        if m.row(i).iter().all(|&x| x == 0.0) {
            m.row_mut(i)[i % d] = 1.0;
        }
    }
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix<f32>> {
    prop::collection::vec(-1.0f32..1.0, rows * cols).prop_map(move |v| {
        let mut m = Matrix::new(rows, cols, v).unwrap();
        fix_rows(&mut m);
        m
    })
}

fn bits(k: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..=1, k * k)
}

/// Random profile over `c` classes, some uncovered, plus matching directions.
fn detector_case() -> impl Strategy<Value = (DetectorProfile, DirectionSet, Matrix<f32>, Vec<usize>, Vec<usize>, Vec<bool>)> {
    (2usize..=5, 2usize..=5, 2usize..=4, 1usize..=30).prop_flat_map(|(k, d, c, n)| {
        (
            prop::collection::vec((bits(k), bits(k), any::<bool>()), c),
            matrix(k, d),
            matrix(n, d),
            prop::collection::vec(0..c, n),
            prop::collection::vec(0..c, n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(move |(grids, dirs, emb, truth, pred, pos)| {
                let classes = grids
                    .into_iter()
                    .enumerate()
                    .map(|(i, (p, q, covered))| ClassProfile {
                        class: format!("class{i}"),
                        n_positive: covered as usize,
                        n_negative: covered as usize,
                        positive: covered.then_some(p),
                        negative: covered.then_some(q),
                    })
                    .collect();
                let profile = DetectorProfile {
                    schema: PROFILE_SCHEMA.into(),
                    mode: DetectorMode::Adversarial,
                    threshold: 0.6,
                    concept_names: names("c", k),
                    classes,
                };
                let dirs = DirectionSet::new(dirs, DirectionKind::ConceptDirections).unwrap();
                (profile, dirs, emb, truth, pred, pos)
            })
    })
}

fn iou_oracle(a: &Mask, b: &[u8]) -> f64 {
    let inter = a.cells.iter().zip(b).filter(|(x, y)| **x && **y == 1).count();
    let union = a.cells.iter().zip(b).filter(|(x, y)| **x || **y == 1).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn meta_strategy(n_classes: usize) -> impl Strategy<Value = SampleMeta> {
    (0..n_classes, 0..n_classes, prop_oneof![Just("clean"), Just("pgd_linf"), Just("fgsm")], any::<u32>())
        .prop_map(|(gt, out, tag, id)| SampleMeta {
            sample_id: format!("s{id}"),
            ground_truth: gt,
            model_output: out,
            perturbation: PerturbationTag::new(tag),
        })
}

fn filter_strategy(n_classes: usize) -> impl Strategy<Value = SampleFilter> {
    let leaf = prop_oneof![
        Just(SampleFilter::All),
        (0..n_classes).prop_map(SampleFilter::GroundTruth),
        (0..n_classes).prop_map(SampleFilter::ModelOutput),
        Just(SampleFilter::Clean),
        Just(SampleFilter::Perturbed),
        Just(SampleFilter::Correct),
        Just(SampleFilter::Misclassified),
        Just(SampleFilter::Perturbation("fgsm".into())),
    ];
    leaf.prop_recursive(2, 6, 3, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 1..3).prop_map(SampleFilter::And),
            prop::collection::vec(inner.clone(), 1..3).prop_map(SampleFilter::Or),
            inner.prop_map(|f| SampleFilter::Not(Box::new(f))),
        ]
    })
}

fn bundle_strategy() -> impl Strategy<Value = EmbeddingBundle> {
    (2usize..=4, 2usize..=4, 1usize..=6, 1usize..=5, 0usize..=12, any::<bool>()).prop_flat_map(
        |(k, c, d_oracle, d_vision, n, with_oracle)| {
            (
                matrix(n, d_vision),
                matrix(n, d_oracle),
                prop::collection::vec(meta_strategy(c), n),
                matrix(k, d_oracle),
                matrix(c, d_oracle),
                prop::collection::vec(prop::collection::btree_set(0..k, 1..=k), c),
            )
                .prop_map(move |(vision, oracle, meta, cd, kd, rel)| {
                    let dictionary = ConceptDictionary {
                        concepts: names("concept", k),
                        classes: names("class", c),
                        relevant: rel.into_iter().map(|s| s.into_iter().collect()).collect(),
                    };
                    EmbeddingBundle {
                        vision,
                        oracle: with_oracle.then_some(oracle),
                        meta,
                        dictionary,
                        concept_dirs: DirectionSet::new(cd, DirectionKind::ConceptDirections).unwrap(),
                        class_dirs: DirectionSet::new(kd, DirectionKind::ClassDirections).unwrap(),
                    }
                })
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn detection_follows_the_iou_rule((profile, dirs, emb, _truth, pred, _pos) in detector_case()) {
        for i in 0..emb.rows() {
            let c = pred[i];
            match detect(emb.row(i), c, &profile, &dirs) {
                Ok(r) => {
                    let grid = eval_predicates(emb.row(i), &dirs).unwrap();
                    let p = profile.classes[c].positive.as_ref().unwrap();
                    let n = profile.classes[c].negative.as_ref().unwrap();
                    prop_assert_eq!(r.iou_p, iou_oracle(&grid, p));
                    prop_assert_eq!(r.iou_n, iou_oracle(&grid, n));
                    prop_assert_eq!(r.verdict == Verdict::Flagged, r.iou_p > r.iou_n);
                }
                Err(e) => {
                    prop_assert!(!profile.classes[c].is_covered());
                    prop_assert_eq!(e.code(), "uncovered_class");
                }
            }
        }
    }

    #[test]
    fn verdicts_are_scale_invariant(
        (profile, dirs, emb, _truth, pred, _pos) in detector_case(),
        exp in -16i32..16,
    ) {
        let alpha = 2f32.powi(exp);
        for i in 0..emb.rows() {
            let scaled: Vec<f32> = emb.row(i).iter().map(|&v| v * alpha).collect();
            let a = detect(emb.row(i), pred[i], &profile, &dirs).ok();
            let b = detect(&scaled, pred[i], &profile, &dirs).ok();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn accuracy_table_accounts_for_every_input((profile, dirs, emb, truth, pred, pos) in detector_case()) {
        let table = evaluate(&profile, &dirs, &RuntimeSet { embeddings: &emb, truth: &truth, predicted: &pred, positive: &pos }).unwrap();
        let mut missed = vec![0usize; profile.classes.len()];
        let mut scored_pos = vec![0usize; profile.classes.len()];
        let mut abstained = vec![0usize; profile.classes.len()];
        for i in 0..emb.rows() {
            match detect(emb.row(i), pred[i], &profile, &dirs) {
                Err(_) => abstained[truth[i]] += 1,
                Ok(r) if pos[i] => {
                    scored_pos[truth[i]] += 1;
                    missed[truth[i]] += (r.verdict == Verdict::Clean) as usize;
                }
                Ok(_) => {}
            }
        }
        for (c, row) in table.per_class.iter().enumerate() {
            prop_assert_eq!(row.abstained, abstained[c]);
            prop_assert_eq!(row.n_positive, scored_pos[c]);
            match row.a_p {
                Some(a_p) => {
                    let fnr = missed[c] as f64 / scored_pos[c] as f64;
                    assert_abs_diff_eq!(a_p + fnr, 1.0, epsilon = 1e-12);
                }
                None => prop_assert_eq!(scored_pos[c], 0),
            }
        }
        let total = &table.total;
        prop_assert_eq!(total.n_positive + total.n_negative + total.abstained, emb.rows());
    }

    #[test]
    fn decision_rule_is_exclusive_and_gated(gt in 0usize..4, out in 0usize..4, zm in 0usize..4, zo in 0usize..4) {
        let locus = decide(gt, out, zm, zo);
        let expected = if out == gt {
            ErrorLocus::NoError
        } else if zo != gt {
            ErrorLocus::OracleUnreliable
        } else if zm != zo {
            ErrorLocus::EncoderError
        } else {
            ErrorLocus::HeadError
        };
        prop_assert_eq!(locus, expected);
        let mut counts = LocusCounts::default();
        counts.add(locus);
        prop_assert_eq!(counts.total(), 1);
        if zo != gt {
            prop_assert_eq!(counts.encoder + counts.head, 0);
        }
    }

    #[test]
    fn identical_embeddings_under_identity_map_give_head_errors(
        (classes, emb) in (2usize..=4, 2usize..=5).prop_flat_map(|(c, d)| (matrix(c, d), matrix(1, d))),
        out_shift in 1usize..4,
    ) {
        let dirs = DirectionSet::new(classes, DirectionKind::ClassDirections).unwrap();
        let c = dirs.len();
        let e = emb.row(0);
        let gt = zero_shot(e, &dirs).unwrap();
        let out = (gt + 1 + out_shift % (c - 1)) % c;
        let map = AffineMap::<f32>::identity(e.len());
        let mapped = map.apply(e).unwrap();
        prop_assert_eq!(localize(&mapped, e, gt, out, &dirs).unwrap(), ErrorLocus::HeadError);
        let wrong_gt = (gt + 1) % c;
        let locus = localize(&mapped, e, wrong_gt, gt, &dirs).unwrap();
        prop_assert_eq!(locus, ErrorLocus::OracleUnreliable);
    }

    #[test]
    fn robust_set_grows_with_threshold(
        (k, a, b, rel) in (1usize..=5).prop_flat_map(|k| (
            Just(k),
            prop::collection::vec(0u64..=20, k * k),
            prop::collection::vec(0u64..=20, k * k),
            prop::collection::vec(any::<bool>(), k * k),
        )),
        t1 in 0.0f64..1.0,
        t2 in 0.0f64..1.0,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let names = names("c", k);
        let h1 = summary_from_counts(&names, SummaryKind::GroundTruth, a, 20, None, "a".into());
        let h2 = summary_from_counts(&names, SummaryKind::GroundTruth, b, 20, None, "b".into());
        let relevance = Mask { k, cells: rel };
        let r_lo = robustness_analysis(&h1, &h2, lo, &relevance).unwrap();
        let r_hi = robustness_analysis(&h1, &h2, hi, &relevance).unwrap();
        prop_assert!(r_lo.robust_mask.is_subset_of(&r_hi.robust_mask));
        prop_assert_eq!(r_lo.n_robust_relevant + r_lo.n_nonrobust_relevant, relevance.count());
        for c in 0..k * k {
            prop_assert_eq!(r_lo.robust_mask.cells[c], (h1.grid[c] - h2.grid[c]).abs() <= lo);
        }
    }

    #[test]
    fn affine_apply_is_affine(
        (w, b, z1, z2) in (1usize..=6, 1usize..=6).prop_flat_map(|(s, t)| (
            prop::collection::vec(-2.0f64..2.0, s * t),
            prop::collection::vec(-2.0f64..2.0, t),
            prop::collection::vec(-2.0f64..2.0, s),
            prop::collection::vec(-2.0f64..2.0, s),
        )),
    ) {
        let (s, t) = (z1.len(), b.len());
        let map = AffineMap::new(Matrix::new(t, s, w).unwrap(), b.clone()).unwrap();
        let sum: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| a + b).collect();
        let lhs: Vec<f64> = map.apply(&sum).unwrap().iter().zip(map.apply(&z2).unwrap()).map(|(a, b)| a - b).collect();
        let rhs: Vec<f64> = map.apply(&z1).unwrap().iter().zip(&b).map(|(a, b)| a - b).collect();
        for (x, y) in lhs.iter().zip(&rhs) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-6);
        }
    }

    #[test]
    fn bundle_round_trips(bundle in bundle_strategy()) {
        bundle.validate().unwrap();
        let bytes = encode_bundle(&bundle).unwrap();
        prop_assert_eq!(decode_bundle(&bytes).unwrap(), bundle.clone());
        let truncated = &bytes[..bytes.len() - 1];
        prop_assert!(decode_bundle(truncated).is_err());
    }

    #[test]
    fn filters_are_idempotent_and_compose(
        meta in prop::collection::vec(meta_strategy(3), 0..30),
        p in filter_strategy(3),
        q in filter_strategy(3),
    ) {
        let once = filter_within(&meta, 0..meta.len(), &p);
        prop_assert_eq!(filter_within(&meta, once.iter().copied(), &p), once.clone());
        let nested = filter_within(&meta, once.iter().copied(), &q);
        let both = filter_within(&meta, 0..meta.len(), &p.clone().and(q.clone()));
        prop_assert_eq!(&nested, &both);
        let swapped = filter_within(&meta, filter_within(&meta, 0..meta.len(), &q), &p);
        prop_assert_eq!(nested, swapped);
    }
}

#[test]
fn bundle_filter_uses_metadata_order() {
    let dict = ConceptDictionary { concepts: names("c", 2), classes: names("k", 2), relevant: vec![vec![0], vec![1]] };
    let meta: Vec<SampleMeta> = (0..4)
        .map(|i| SampleMeta {
            sample_id: i.to_string(),
            ground_truth: i % 2,
            model_output: 0,
            perturbation: PerturbationTag::clean(),
        })
        .collect();
    let dirs = Matrix::from_rows(&[[1.0f32, 0.0], [0.0, 1.0]]).unwrap();
    let bundle = EmbeddingBundle {
        vision: Matrix::from_fn(4, 2, |i, j| (i + j) as f32 + 1.0),
        oracle: None,
        meta,
        dictionary: dict,
        concept_dirs: DirectionSet::new(dirs.clone(), DirectionKind::ConceptDirections).unwrap(),
        class_dirs: DirectionSet::new(dirs, DirectionKind::ClassDirections).unwrap(),
    };
    assert_eq!(filter(&bundle, &SampleFilter::Correct), vec![0, 2]);
    assert_eq!(filter(&bundle, &SampleFilter::Misclassified), vec![1, 3]);
}
