use std::collections::HashMap;

use hybrep::proposals::{box_iou, build_graph, feature_affinity, filter_proposals, spectral_cluster, SimilarityGraph};
use hybrep::BBox;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bbox() -> impl Strategy<Value = BBox> {
    (0u32..200, 0u32..200, 1u32..56, 1u32..56).prop_map(|(x, y, w, h)| BBox::in_frame(x, y, x + w, y + h).unwrap())
}

/// IoU by counting covered pixels.
fn pixel_iou(a: &BBox, b: &BBox) -> f64 {
    let inside = |r: &BBox, x: u32, y: u32| x >= r.x1 && x < r.x2 && y >= r.y1 && y < r.y2;
    let (mut inter, mut union) = (0u64, 0u64);
    for y in a.y1.min(b.y1)..a.y2.max(b.y2) {
        for x in a.x1.min(b.x1)..a.x2.max(b.x2) {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    inter as f64 / union as f64
}

/// Same partition up to a renaming of the labels.
fn same_partition(a: &[usize], b: &[usize]) -> bool {
    let mut fwd = HashMap::new();
    let mut back = HashMap::new();
    a.iter().zip(b).all(|(x, y)| *fwd.entry(x).or_insert(y) == y && *back.entry(y).or_insert(x) == x)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn iou_matches_pixel_count_and_is_symmetric(a in bbox(), b in bbox()) {
        let iou = box_iou(&a, &b);
        prop_assert!((f64::from(iou) - pixel_iou(&a, &b)).abs() < 1e-6);
        prop_assert_eq!(iou, box_iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&iou));
        prop_assert_eq!(box_iou(&a, &a), 1.0);
    }

    #[test]
    fn affinity_decreases_with_distance(
        f in prop::collection::vec(-3.0f32..3.0, 4),
        dir in prop::collection::vec(-1.0f32..1.0, 4),
        t1 in 0.0f32..2.0,
        dt in 0.01f32..2.0,
        sigma in 0.2f32..3.0,
    ) {
        prop_assume!(dir.iter().map(|v| v * v).sum::<f32>() > 1e-2);
        let at = |t: f32| -> Vec<f32> { f.iter().zip(&dir).map(|(a, d)| a + t * d).collect() };
        let near = feature_affinity(&f, &at(t1), sigma).unwrap();
        let far = feature_affinity(&f, &at(t1 + dt), sigma).unwrap();
        prop_assert!(far <= near);
        prop_assert_eq!(feature_affinity(&f, &f, sigma).unwrap(), 1.0);
    }

    #[test]
    fn graph_matches_double_loop(
        boxes in prop::collection::vec(bbox(), 1..10),
        seed in any::<u64>(),
        lambda_b in 0.0f32..=1.0,
        sigma in 0.3f32..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats: Vec<Vec<f32>> = boxes.iter().map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let lambda_f = 1.0 - lambda_b;
        let g = build_graph(&boxes, &feats, lambda_b, lambda_f, sigma).unwrap();
        for i in 0..boxes.len() {
            for j in 0..boxes.len() {
                let d2: f64 = feats[i].iter().zip(&feats[j]).map(|(a, b)| f64::from(a - b).powi(2)).sum();
                let wf = (-d2 / (2.0 * f64::from(sigma).powi(2))).exp();
                let w = f64::from(lambda_b) * pixel_iou(&boxes[i], &boxes[j]) + f64::from(lambda_f) * wf;
                prop_assert!((f64::from(g.weight(i, j)) - w).abs() < 1e-5, "({}, {})", i, j);
            }
        }
    }

    #[test]
    fn filter_keeps_exactly_the_admissible_boxes(boxes in prop::collection::vec(
        (0u32..100, 0u32..100, 1u32..156, 1u32..156).prop_map(|(x, y, w, h)| BBox::in_frame(x, y, x + w, y + h).unwrap()),
        0..20,
    )) {
        let kept = filter_proposals(&boxes);
        let expected: Vec<BBox> = boxes
            .iter()
            .filter(|b| {
                let (w, h) = (u64::from(b.width()), u64::from(b.height()));
                (3600..=25600).contains(&(w * h)) && w.max(h) < 3 * w.min(h)
            })
            .copied()
            .collect();
        prop_assert_eq!(kept, expected);
    }
}

/// Block-diagonal graph with random positive weights inside blocks of the
/// given sizes, zero across blocks.
fn planted(sizes: &[usize], rng: &mut ChaCha8Rng) -> (SimilarityGraph, Vec<usize>) {
    let truth: Vec<usize> = sizes.iter().enumerate().flat_map(|(c, &s)| std::iter::repeat_n(c, s)).collect();
    let n = truth.len();
    let mut w = vec![0.0f32; n * n];
    for i in 0..n {
        for j in i..n {
            if truth[i] == truth[j] {
                let v = if i == j { 1.0 } else { rng.random_range(0.2..1.0) };
                w[i * n + j] = v;
                w[j * n + i] = v;
            }
        }
    }
    (SimilarityGraph::from_weights(n, w).unwrap(), truth)
}

#[test]
fn planted_components_are_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..50 {
        let q = rng.random_range(2..=8);
        let sizes: Vec<usize> = (0..q).map(|_| rng.random_range(2..=64 / q)).collect();
        let (g, truth) = planted(&sizes, &mut rng);
        let labels = spectral_cluster(&g, q, trial).unwrap();
        assert!(same_partition(&labels, &truth), "trial {trial}: sizes {sizes:?}");
    }
}

#[test]
fn partition_comparison_ignores_label_names() {
    assert!(same_partition(&[0, 0, 1, 2], &[5, 5, 3, 9]));
    assert!(!same_partition(&[0, 0, 1], &[1, 0, 0]));
    assert!(!same_partition(&[0, 1], &[2, 2]));
}
