use proptest::prelude::*;
use urveda::metrics::{boundary_points, dsc, hausdorff, BinaryMask, HausdorffMode, Point};

const UNIT: (f64, f64) = (1.0, 1.0);

fn mask(h: usize, w: usize) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(any::<bool>(), h * w).prop_map(move |bits| BinaryMask::new(h, w, bits))
}

fn points() -> impl Strategy<Value = Vec<Point>> {
    prop::collection::btree_set((0usize..12, 0usize..12), 1..8).prop_map(|s| s.into_iter().collect())
}

/// `m` placed at `(r0, c0)` on an empty `h×w` canvas.
fn embed(m: &BinaryMask, h: usize, w: usize, r0: usize, c0: usize) -> BinaryMask {
    let mut bits = vec![false; h * w];
    for r in 0..m.height {
        for c in 0..m.width {
            bits[(r + r0) * w + c + c0] = m.get(r, c);
        }
    }
    BinaryMask::new(h, w, bits)
}

proptest! {
    #[test]
    fn dsc_symmetric_and_bounded(a in mask(5, 4), b in mask(5, 4)) {
        let ab = dsc(&a, &b).unwrap();
        prop_assert_eq!(ab, dsc(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn hausdorff_is_a_metric(x in points(), y in points(), z in points()) {
        let d = |a: &[Point], b: &[Point]| hausdorff(a, b, HausdorffMode::Symmetric, UNIT).unwrap();
        prop_assert_eq!(d(&x, &x), 0.0);
        prop_assert_eq!(d(&x, &y) == 0.0, x == y);
        prop_assert_eq!(d(&x, &y), d(&y, &x));
        prop_assert!(d(&x, &z) <= d(&x, &y) + d(&y, &z) + 1e-12);
    }

    #[test]
    fn symmetric_is_max_of_directed(x in points(), y in points()) {
        let dir = |a: &[Point], b: &[Point]| hausdorff(a, b, HausdorffMode::Directed, UNIT).unwrap();
        let sym = hausdorff(&x, &y, HausdorffMode::Symmetric, UNIT).unwrap();
        prop_assert_eq!(sym, dir(&x, &y).max(dir(&y, &x)));
    }

    #[test]
    fn joint_translation_preserves_metrics(a in mask(4, 5), b in mask(4, 5), dr in 0usize..4, dc in 0usize..4) {
        // a one-pixel empty ring keeps the frame border out of the contours
        let (h, w) = (4 + 2 + 3, 5 + 2 + 3);
        let at = |m: &BinaryMask, r, c| embed(m, h, w, r, c);
        let hd = |x: &BinaryMask, y: &BinaryMask| {
            hausdorff(&boundary_points(x), &boundary_points(y), HausdorffMode::Symmetric, UNIT)
        };
        let (a0, b0) = (at(&a, 1, 1), at(&b, 1, 1));
        let (a1, b1) = (at(&a, 1 + dr, 1 + dc), at(&b, 1 + dr, 1 + dc));
        prop_assert_eq!(dsc(&a0, &b0).unwrap(), dsc(&a1, &b1).unwrap());
        prop_assert_eq!(hd(&a0, &b0), hd(&a1, &b1));
    }

    #[test]
    fn boundary_is_subset_of_foreground(m in mask(6, 6)) {
        for (r, c) in boundary_points(&m) {
            prop_assert!(m.get(r, c));
        }
    }
}
