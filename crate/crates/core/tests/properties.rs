use std::collections::BTreeSet;

use proptest::prelude::*;
use tilegraph::numerics::{to_bf16, QuantParams};
use tilegraph::ops::{adaptive_window, build_gemm_subgraph, split_even, tree_reduce, GemmParams};
use tilegraph::place::{place_custom, place_naive, route_check};
use tilegraph::{ArchSpec, Region, Tensor};

proptest! {
    #[test]
    fn split_even_partitions(n in 1usize..500, parts in 1usize..40) {
        prop_assume!(parts <= n);
        let rs = split_even(n, parts);
        prop_assert_eq!(rs.len(), parts);
        prop_assert_eq!(rs[0].start, 0);
        prop_assert_eq!(rs[parts - 1].end, n);
        for w in rs.windows(2) {
            prop_assert_eq!(w[0].end, w[1].start);
            prop_assert!(w[0].len() >= w[1].len());
            prop_assert!(w[0].len() - w[1].len() <= 1);
        }
    }

    #[test]
    fn adaptive_windows_cover_and_stay_monotone(input in 1usize..64, out_frac in 0.0f64..1.0) {
        let output = 1 + ((input - 1) as f64 * out_frac) as usize;
        let mut covered = vec![false; input];
        let mut prev = 0..0;
        for i in 0..output {
            let w = adaptive_window(i, input, output);
            prop_assert!(!w.is_empty() && w.end <= input);
            prop_assert!(w.start >= prev.start && w.end >= prev.end);
            for c in w.clone() {
                covered[c] = true;
            }
            prev = w;
        }
        prop_assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn tree_reduce_is_exact_on_integers(parts in prop::collection::vec(prop::collection::vec(-1000i32..1000, 3), 1..20)) {
        let fparts: Vec<Vec<f32>> = parts.iter().map(|p| p.iter().map(|&v| v as f32).collect()).collect();
        let got = tree_reduce(&fparts);
        for j in 0..3 {
            let want: i32 = parts.iter().map(|p| p[j]).sum();
            prop_assert_eq!(got[j], want as f32);
        }
    }

    #[test]
    fn region_overlap_is_symmetric(a0 in 0usize..8, a1 in 1usize..8, b0 in 0usize..8, b1 in 1usize..8, r in 0usize..4) {
        let shape = [8, 16];
        let a = Region::Box(vec![a0.min(7)..(a0 + a1).min(8), 0..16]);
        let b = Region::Box(vec![b0.min(7)..(b0 + b1).min(8), r..r + 4]);
        prop_assert_eq!(a.overlaps(&b, &shape), b.overlaps(&a, &shape));
        let t = Tensor::zeros(&shape);
        prop_assert_eq!(t.read(&a).unwrap().len(), a.len(&shape));
    }

    #[test]
    fn bf16_error_is_bounded(x in -1e30f32..1e30) {
        let r = to_bf16(x);
        prop_assert!(((r - x) as f64).abs() <= (x as f64).abs() * 2f64.powi(-8));
    }

    #[test]
    fn int8_round_trip_within_half_step(lo in -10.0f32..0.0, hi in 0.01f32..10.0, t in 0.0f32..1.0) {
        let q = QuantParams::from_range(lo, hi).unwrap();
        let x = lo + (hi - lo) * t;
        prop_assert!((q.fake_quant(x) - x).abs() <= q.scale * 0.5 + 1e-6);
    }

    #[test]
    fn placements_are_legal(k_tiles in 1usize..60, n in 1usize..16, kc in 1usize..4) {
        let arch = ArchSpec::default();
        let p = GemmParams::with_clusters(1, 8 * k_tiles, n, kc).with_n_splits(n.min(3));
        prop_assume!(p.validate(&arch).is_ok());
        let g = build_gemm_subgraph(&p, Tensor::filled(&[8 * k_tiles, n], 1.0), None, &[], &arch).unwrap();
        for pl in [place_custom(&g, &arch).unwrap(), place_naive(&g, &arch).unwrap()] {
            prop_assert_eq!(pl.assignment.len(), g.kernel_count());
            let tiles: BTreeSet<_> = pl.assignment.values().collect();
            prop_assert_eq!(tiles.len(), g.kernel_count());
            prop_assert!(pl.assignment.values().all(|&c| arch.contains(c)));
            let r = route_check(&g, &pl, &arch).unwrap();
            prop_assert_eq!(r.feasible, r.overflows.is_empty());
        }
    }
}
