use num_rational::Ratio;
use proptest::prelude::*;
use semheat_core::concept::{eval_predicates, zero_shot, Mask};
use semheat_core::heatmap::{binarize, differential, iou, summary, Heatmap, SummaryKind};
use semheat_core::store::{DirectionKind, DirectionSet};
use semheat_core::Matrix;

const CASES: u32 = 1000;

fn names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("c{i}")).collect()
}

fn dirs_from(k: usize, d: usize, v: Vec<f32>, kind: DirectionKind) -> DirectionSet {
    let mut m = Matrix::new(k, d, v).unwrap();
    for i in 0..k {
        if m.row(i).iter().all(|&x| x == 0.0) {
            m.row_mut(i)[i % d] = 1.0;
        }
    }
    DirectionSet::new(m, kind).unwrap()
}

fn nonzero(v: &mut [f32]) {
    if v.iter().all(|&x| x == 0.0) {
        v[0] = 1.0;
    }
}

/// (k, directions, embedding rows) with nonzero rows.
fn world(max_rows: usize) -> impl Strategy<Value = (usize, DirectionSet, Matrix<f32>)> {
    (2usize..=6, 2usize..=6, 1usize..=max_rows).prop_flat_map(|(k, d, n)| {
        (
            Just(k),
            prop::collection::vec(-1.0f32..1.0, k * d),
            prop::collection::vec(-1.0f32..1.0, n * d),
            Just(d),
            Just(n),
        )
            .prop_map(|(k, dv, mut ev, d, n)| {
                for r in ev.chunks_mut(d) {
                    nonzero(r);
                }
                (k, dirs_from(k, d, dv, DirectionKind::ConceptDirections), Matrix::new(n, d, ev).unwrap())
            })
    })
}

fn brute_cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn summary_of(dirs: &DirectionSet, rows: &Matrix<f32>, k: usize) -> Heatmap {
    summary(rows, dirs, &names(k), SummaryKind::GroundTruth, None, "all").unwrap()
}

/// Summary heatmap of arbitrary grid values, for the binarize laws.
fn grid_summary(k: usize, grid: Vec<f64>) -> Heatmap {
    let n = 100u64;
    let counts: Vec<u64> = grid.iter().map(|&v| (v * n as f64).round() as u64).collect();
    semheat_core::heatmap::summary_from_counts(&names(k), SummaryKind::GroundTruth, counts, n as usize, None, "g".into())
}

fn binary_map(k: usize, cells: Vec<bool>) -> Heatmap {
    let h = grid_summary(k, cells.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect());
    binarize(&h, 0.5).unwrap()
}

fn masks() -> impl Strategy<Value = (usize, Vec<bool>, Vec<bool>)> {
    (1usize..=6).prop_flat_map(|k| {
        (Just(k), prop::collection::vec(any::<bool>(), k * k), prop::collection::vec(any::<bool>(), k * k))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn summary_matches_brute_force_counts((k, dirs, rows) in world(12)) {
        let h = summary_of(&dirs, &rows, k);
        let n = rows.rows() as u64;
        for i in 0..k {
            for j in 0..k {
                let count = rows
                    .iter_rows()
                    .filter(|e| brute_cosine(e, dirs.direction(i)) > brute_cosine(e, dirs.direction(j)))
                    .count() as u64;
                // Cells whose cosines nearly tie may differ from the f64 oracle by rounding.
                let near_tie = rows.iter_rows().any(|e| {
                    (brute_cosine(e, dirs.direction(i)) - brute_cosine(e, dirs.direction(j))).abs() < 1e-12
                });
                if !near_tie {
                    prop_assert_eq!(h.ratio(i, j).unwrap(), Ratio::new(count, n));
                }
            }
        }
    }

    #[test]
    fn summary_of_disjoint_union_is_weighted_average(
        (k, dirs, rows) in world(16),
        cut in 1usize..16,
    ) {
        let n = rows.rows();
        prop_assume!(n >= 2);
        let cut = cut.min(n - 1);
        let a: Vec<usize> = (0..cut).collect();
        let b: Vec<usize> = (cut..n).collect();
        let ha = summary_of(&dirs, &rows.select_rows(&a), k);
        let hb = summary_of(&dirs, &rows.select_rows(&b), k);
        let hu = summary_of(&dirs, &rows, k);
        let (na, nb) = (a.len() as u64, b.len() as u64);
        for i in 0..k {
            for j in 0..k {
                let weighted = (ha.ratio(i, j).unwrap() * na + hb.ratio(i, j).unwrap() * nb) / (na + nb);
                prop_assert_eq!(hu.ratio(i, j).unwrap(), weighted);
            }
        }
    }

    #[test]
    fn binarize_is_monotone_in_threshold(
        (k, grid) in (1usize..=6).prop_flat_map(|k| (Just(k), prop::collection::vec(0.0f64..=1.0, k * k))),
        t1 in 0.01f64..=1.0,
        t2 in 0.01f64..=1.0,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let h = grid_summary(k, grid);
        let b_lo = binarize(&h, lo).unwrap();
        let b_hi = binarize(&h, hi).unwrap();
        for (x, y) in b_lo.grid.iter().zip(&b_hi.grid) {
            prop_assert!(x >= y);
        }
        for (v, b) in h.grid.iter().zip(&b_lo.grid) {
            prop_assert_eq!(*b, if *v >= lo { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn iou_is_symmetric_and_one_only_on_equality((k, a, b) in masks()) {
        let ha = binary_map(k, a.clone());
        let hb = binary_map(k, b.clone());
        let ab = iou(&ha, &hb).unwrap();
        prop_assert_eq!(ab, iou(&hb, &ha).unwrap());
        prop_assert_eq!(ab == 1.0, a == b);
        prop_assert_eq!(iou(&ha, &ha).unwrap(), 1.0);
        let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
        let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
        let expected = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        prop_assert_eq!(ab, expected);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn differential_is_symmetric_with_triangle_inequality(
        (k, g1, g2, g3) in (1usize..=6).prop_flat_map(|k| (
            Just(k),
            prop::collection::vec(0.0f64..=1.0, k * k),
            prop::collection::vec(0.0f64..=1.0, k * k),
            prop::collection::vec(0.0f64..=1.0, k * k),
        )),
    ) {
        let (h1, h2, h3) = (grid_summary(k, g1), grid_summary(k, g2), grid_summary(k, g3));
        let d12 = differential(&h1, &h2).unwrap();
        let d21 = differential(&h2, &h1).unwrap();
        let d13 = differential(&h1, &h3).unwrap();
        let d32 = differential(&h3, &h2).unwrap();
        prop_assert_eq!(&d12.grid, &d21.grid);
        for c in 0..k * k {
            prop_assert!(d12.grid[c] <= d13.grid[c] + d32.grid[c] + 1e-12);
            prop_assert_eq!(d12.grid[c], (h1.grid[c] - h2.grid[c]).abs());
        }
        prop_assert!(differential(&h1, &h1).unwrap().grid.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn predicates_are_invariant_under_power_of_two_scaling(
        (_k, dirs, rows) in world(1),
        exp in -20i32..20,
    ) {
        let e = rows.row(0);
        let alpha = 2f32.powi(exp);
        let scaled: Vec<f32> = e.iter().map(|&v| v * alpha).collect();
        prop_assert_eq!(eval_predicates(e, &dirs).unwrap(), eval_predicates(&scaled, &dirs).unwrap());
        prop_assert_eq!(zero_shot(e, &dirs).unwrap(), zero_shot(&scaled, &dirs).unwrap());
    }

    #[test]
    fn predicates_are_invariant_under_positive_scaling(
        (k, dirs, rows) in world(1),
        alpha in 1e-3f64..1e3,
    ) {
        let e: Vec<f64> = rows.row(0).iter().map(|&v| v as f64).collect();
        let scaled: Vec<f64> = e.iter().map(|&v| v * alpha).collect();
        let sims: Vec<f64> = (0..k).map(|i| {
            let d: Vec<f64> = dirs.direction(i).iter().map(|&v| v as f64).collect();
            let dot: f64 = e.iter().zip(&d).map(|(a, b)| a * b).sum();
            dot / (e.iter().map(|v| v * v).sum::<f64>().sqrt() * d.iter().map(|v| v * v).sum::<f64>().sqrt())
        }).collect();
        let separated = (0..k).all(|i| (0..k).all(|j| i == j || (sims[i] - sims[j]).abs() > 1e-9));
        prop_assume!(separated);
        prop_assert_eq!(eval_predicates(&e, &dirs).unwrap(), eval_predicates(&scaled, &dirs).unwrap());
        prop_assert_eq!(zero_shot(&e, &dirs).unwrap(), zero_shot(&scaled, &dirs).unwrap());
    }

    #[test]
    fn predicate_grid_is_a_strict_order((k, dirs, rows) in world(1)) {
        let g: Mask = eval_predicates(rows.row(0), &dirs).unwrap();
        for i in 0..k {
            prop_assert!(!g.get(i, i));
            for j in 0..k {
                prop_assert!(!(g.get(i, j) && g.get(j, i)));
                if !g.get(i, j) && !g.get(j, i) {
                    let (a, b) = (brute_cosine(rows.row(0), dirs.direction(i)), brute_cosine(rows.row(0), dirs.direction(j)));
                    prop_assert!((a - b).abs() < 1e-9);
                }
                for l in 0..k {
                    if g.get(i, j) && g.get(j, l) {
                        prop_assert!(g.get(i, l));
                    }
                }
            }
        }
    }
}
