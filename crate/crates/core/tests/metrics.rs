use chamferlab_core::chamfer::{chamfer_grad_points, chamfer_points};
use chamferlab_core::evalmetrics::{density_coverage, evaluate, f1_pc, frechet, precision_recall, GroupLabels};
use chamferlab_core::featspace::{FeatureSet, NeighborIndex, Source, Strategy};
use chamferlab_core::numkit::{gauss, Matrix, RngStream};
use proptest::prelude::*;

fn lattice(seed: u64, n: usize, d: usize) -> Matrix {
    gauss(&mut RngStream::new(seed), n, d).map(|v| (v * 2.0).round() / 2.0)
}

fn fs(m: &Matrix) -> FeatureSet {
    FeatureSet::new(m.clone(), 0, Source::Real).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn precision_and_recall_are_dual(seed in any::<u64>(), n in 6usize..40, m in 6usize..40, d in 1usize..5, k in 1usize..5) {
        let (a, b) = (lattice(seed, n, d), lattice(seed ^ 1, m, d));
        let (p_ab, r_ab) = precision_recall(&fs(&a), &fs(&b), k).unwrap();
        let (p_ba, r_ba) = precision_recall(&fs(&b), &fs(&a), k).unwrap();
        prop_assert_eq!(p_ab, r_ba);
        prop_assert_eq!(r_ab, p_ba);
    }

    #[test]
    fn metrics_are_invariant_to_integer_shifts_and_row_order(seed in any::<u64>(), n in 6usize..40, d in 1usize..5, shift in -4i32..4) {
        let (a, b) = (lattice(seed, n, d), lattice(seed ^ 2, n + 3, d));
        let s = |m: &Matrix| m.map(|v| v + shift as f64);
        let mut order: Vec<usize> = (0..b.rows()).collect();
        RngStream::new(seed).shuffle(&mut order);
        let b_perm = b.select_rows(&order);
        let base = (precision_recall(&fs(&a), &fs(&b), 3).unwrap(), density_coverage(&fs(&a), &fs(&b), 3).unwrap());
        let moved = (precision_recall(&fs(&s(&a)), &fs(&s(&b)), 3).unwrap(), density_coverage(&fs(&s(&a)), &fs(&s(&b)), 3).unwrap());
        let permuted = (precision_recall(&fs(&a), &fs(&b_perm), 3).unwrap(), density_coverage(&fs(&a), &fs(&b_perm), 3).unwrap());
        prop_assert_eq!(base, moved);
        prop_assert_eq!(base, permuted);
    }

    #[test]
    fn metric_ranges(seed in any::<u64>(), n in 6usize..30, d in 1usize..4) {
        let (a, b) = (fs(&gauss(&mut RngStream::new(seed), n, d)), fs(&gauss(&mut RngStream::new(!seed), n + 1, d).scale(2.0)));
        let r = evaluate(&a, &b, 3, None).unwrap();
        for v in [r.precision, r.recall, r.coverage, r.f1_pc] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(r.density >= 0.0 && r.frechet >= 0.0 && r.chamfer >= 0.0);
        prop_assert!(r.f1_pc >= r.precision.min(r.coverage) - 1e-15 && r.f1_pc <= r.precision.max(r.coverage) + 1e-15);
        let back = frechet(&b, &a).unwrap();
        prop_assert!((back - r.frechet).abs() <= 1e-9 * r.frechet.max(1.0));
    }

    #[test]
    fn chamfer_is_symmetric_and_gradient_sums(seed in any::<u64>(), n in 1usize..20, m in 1usize..20, d in 1usize..4) {
        let mut rng = RngStream::new(seed);
        let (a, b) = (gauss(&mut rng, n, d), gauss(&mut rng, m, d));
        prop_assert_eq!(chamfer_points(&a, &b).unwrap().total, chamfer_points(&b, &a).unwrap().total);
        // shifting every generated coordinate by s changes the loss at the
        // rate of the gradient's entry sum
        let (_, g) = chamfer_grad_points(&a, &b).unwrap();
        let h = 1e-6;
        let shifted = |s: f64| chamfer_points(&a, &b.map(|v| v + s)).unwrap().total;
        let probe = (shifted(h) - shifted(-h)) / (2.0 * h);
        let col: f64 = g.as_slice().iter().sum();
        prop_assert!((probe - col).abs() <= 1e-5 * col.abs().max(1.0));
    }

    #[test]
    fn grid_index_equals_brute_force(seed in any::<u64>(), n in 1usize..80, d in 1usize..4, k in 1usize..6) {
        let pts = lattice(seed, n, d);
        let queries = lattice(seed ^ 3, 10, d);
        let k = k.min(n);
        let brute = NeighborIndex::with_strategy(pts.clone(), Strategy::Brute).knn(&queries, k).unwrap();
        let grid = NeighborIndex::with_strategy(pts, Strategy::Grid).knn(&queries, k).unwrap();
        prop_assert_eq!(brute, grid);
    }
}

#[test]
fn f1_hand_values() {
    assert!((f1_pc(0.950, 0.912).unwrap() - 0.931).abs() <= 0.001);
    assert!((f1_pc(0.975, 0.927).unwrap() - 0.950).abs() <= 0.001);
    assert!(f1_pc(1.1, 0.5).is_err());
}

#[test]
fn worst_group_has_lowest_f1() {
    let mut rng = RngStream::new(9);
    let real = gauss(&mut rng, 60, 2);
    let mut gen = gauss(&mut rng, 60, 2);
    // group 1 of the generated set is pushed away from its real points
    for r in 30..60 {
        gen.row_mut(r)[0] += 4.0;
    }
    let groups: Vec<usize> = (0..60).map(|i| i / 30).collect();
    let rep = evaluate(&fs(&real), &fs(&gen), 3, Some(GroupLabels { real: &groups, gen: &groups })).unwrap();
    let per = rep.per_group.as_ref().unwrap();
    assert_eq!(rep.worst_group, Some(1));
    assert!(per[&1].f1_pc < per[&0].f1_pc);
    assert_eq!(rep.worst().unwrap(), &per[&1]);
}
