use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segscape::graph::{build_hierarchy, horizontal_cut, Criterion, GradientImage, PixelGraph};
use segscape::testkit::{canonical_labels, quantized_gradient, random_gradient, watershed_oracle};

fn check_against_oracle(g: &GradientImage, criterion: Criterion) {
    let h = build_hierarchy(g, criterion).unwrap();
    let oracle = watershed_oracle(g, criterion);

    let minima: Vec<Vec<usize>> = {
        let mut leaves_of = vec![Vec::new(); h.parents().len()];
        for leaf in 0..h.leaf_count() {
            let mut node = h.parents()[leaf];
            loop {
                leaves_of[node].push(leaf);
                if node == h.root() {
                    break;
                }
                node = h.parents()[node];
            }
        }
        let mut m: Vec<Vec<usize>> = h.minima().map(|n| leaves_of[n].clone()).collect();
        m.sort();
        m
    };
    let mut expected: Vec<Vec<usize>> = oracle.minima.iter().map(|s| s.iter().copied().collect()).collect();
    expected.sort();
    assert_eq!(minima, expected, "minima differ");

    assert_eq!(h.mst_edges().len(), oracle.saliency.len());
    for e in h.mst_edges() {
        let s = oracle.saliency.get(&e.edge).unwrap_or_else(|| panic!("edge {} not in oracle MST", e.edge));
        assert!((e.saliency - s).abs() <= 1e-9 * s.abs().max(1.0), "edge {}: {} vs {}", e.edge, e.saliency, s);
    }
    for t in oracle.probe_thresholds() {
        let cut = horizontal_cut(&h, t).unwrap();
        assert_eq!(cut.labels(), canonical_labels(&oracle.cut(t)).as_slice(), "threshold {t}");
    }
}

#[test]
fn random_4x4_matches_oracle() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_gradient(4, 4, &mut rng);
        for c in Criterion::ALL {
            check_against_oracle(&g, c);
        }
    }
}

#[test]
fn plateau_images_match_oracle() {
    for seed in 0..60 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let g = quantized_gradient(5, 4, 4, &mut rng);
        for c in Criterion::ALL {
            check_against_oracle(&g, c);
        }
    }
}

#[test]
fn strip_matches_oracle() {
    let g = GradientImage::new(5, 1, vec![0.1, 0.1, 0.9, 0.1, 0.1]).unwrap();
    let oracle = watershed_oracle(&g, Criterion::Area);
    assert_eq!(oracle.saliency.get(&2), Some(&2.0));
    assert_eq!(oracle.saliency.get(&1), Some(&0.0));
    check_against_oracle(&g, Criterion::Area);
}

#[test]
fn binary_tree_has_n_minus_one_internal_nodes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = random_gradient(6, 5, &mut rng);
    let h = build_hierarchy(&g, Criterion::Volume).unwrap();
    assert_eq!(h.binary_parents().len(), 2 * 30 - 1);
    assert_eq!(h.mst_edges().len(), 29);
    assert_eq!(PixelGraph::new(&g).edge_count(), 2 * 30 - 6 - 5);
    for (c, &p) in h.parents().iter().enumerate() {
        assert!(p > c || c == h.root());
        if !h.is_leaf(c) && c != h.root() {
            assert!(h.altitudes()[p] > h.altitudes()[c], "canonical altitudes strictly increase");
        }
    }
    assert!(h.mst_edges().iter().all(|e| e.saliency >= 0.0));
}
