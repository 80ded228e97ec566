use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segscape::projector::{
    fuzzy_knn, layout, local_reproject, transform_new, FuzzyGraph, Layout2D, ProjectionConfig, SIGMA_MIN,
};
use segscape::testkit::{gaussian_clusters, random_centers};

fn dist2(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Separable clusters: centre spread well above the within-cluster noise.
fn separable(per_cluster: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = random_centers(3, 64, 1.0, &mut rng);
    gaussian_clusters(&centers, per_cluster, 0.2, &mut rng)
}

/// Fraction of `queries` whose `k` nearest 2D neighbours among `pool` are mostly of their own class.
fn majority_rate(queries: &[[f64; 2]], qlabels: &[u32], pool: &[[f64; 2]], plabels: &[u32], k: usize, skip_self: bool) -> f64 {
    let mut good = 0;
    for (q, &l) in queries.iter().zip(qlabels) {
        let mut d: Vec<(f64, u32)> = pool.iter().zip(plabels).map(|(p, &pl)| (dist2(q, p), pl)).collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0));
        let start = usize::from(skip_self);
        let same = d[start..start + k].iter().filter(|x| x.1 == l).count();
        if 2 * same > k {
            good += 1;
        }
    }
    good as f64 / queries.len() as f64
}

#[test]
fn bandwidth_calibration_hits_target_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let dim = rng.random_range(2..8);
        let points: Vec<Vec<f64>> = (0..50).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        for k in [2, 5, 15] {
            let g = fuzzy_knn(&points, k, None, 0.5).unwrap();
            for i in 0..50 {
                assert_eq!(g.knn[i].len(), k);
                assert!(g.sigma[i] >= SIGMA_MIN);
                let sum: f64 = g.knn[i].iter().map(|&(_, d)| (-(d - g.rho[i]).max(0.0) / g.sigma[i]).exp()).sum();
                if g.sigma[i] > SIGMA_MIN {
                    assert!((sum - (k as f64).log2()).abs() < 1e-3, "sum {sum} for k {k}");
                }
            }
            assert!(g.edges.iter().all(|e| e.0 < e.1 && e.2 > 0.0 && e.2 <= 1.0));
        }
    }
}

#[test]
fn two_connected_points_stay_near_min_dist() {
    for cfg in [ProjectionConfig::global(), ProjectionConfig::local()] {
        let g = FuzzyGraph::from_edges(2, vec![(0, 1, 1.0)]).unwrap();
        let l = layout(&g, &cfg).unwrap();
        let d = dist2(&l.coords[0], &l.coords[1]);
        assert!(d >= cfg.min_dist / 2.0 && d <= 10.0 * cfg.min_dist, "distance {d}");
    }
}

#[test]
fn clusters_stay_together_in_the_plane() {
    let (points, labels) = separable(100, 4);
    let cfg = ProjectionConfig::global();
    let g = fuzzy_knn(&points, cfg.k, None, cfg.supervision).unwrap();
    let l = layout(&g, &cfg).unwrap();
    assert_eq!(l.coords.len(), 300);
    assert!(l.coords.iter().all(|c| c[0].is_finite() && c[1].is_finite()));
    let rate = majority_rate(&l.coords, &labels, &l.coords, &labels, 10, true);
    assert!(rate >= 0.9, "same-cluster majority {rate}");
    assert_eq!(layout(&g, &cfg).unwrap(), l);
}

#[test]
fn inserted_points_land_in_their_cluster() {
    let (points, labels) = separable(117, 8);
    // Hold out 50 points spread over the three clusters.
    let (mut old, mut old_labels, mut new, mut new_labels) = (vec![], vec![], vec![], vec![]);
    for (i, (p, l)) in points.into_iter().zip(labels).enumerate() {
        if i % 7 == 3 && new.len() < 50 {
            new.push(p);
            new_labels.push(l);
        } else {
            old.push(p);
            old_labels.push(l);
        }
    }
    assert_eq!(new.len(), 50);
    let cfg = ProjectionConfig::global();
    let g = fuzzy_knn(&old, cfg.k, None, cfg.supervision).unwrap();
    let l = layout(&g, &cfg).unwrap();
    let before = l.clone();
    let placed = transform_new(&new, &old, &l, &cfg).unwrap();
    assert_eq!(l, before);
    assert_eq!(placed.len(), 50);
    let rate = majority_rate(&placed, &new_labels, &l.coords, &old_labels, 10, false);
    assert!(rate >= 0.8, "inserted same-cluster majority {rate}");
}

#[test]
fn insertion_starts_at_duplicate_or_midpoint() {
    let old = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 9.0], vec![9.0, 9.0]];
    let l = Layout2D {
        coords: vec![[0.0, 0.0], [4.0, 2.0], [-5.0, 7.0], [8.0, -8.0]],
        a: 1.9,
        b: 0.8,
    };
    let cfg = ProjectionConfig {
        k: 2,
        transform_epochs: 0,
        ..ProjectionConfig::global()
    };
    let placed = transform_new(&[vec![0.0, 9.0], vec![1.0, 0.0]], &old, &l, &cfg).unwrap();
    assert_eq!(placed[0], [-5.0, 7.0]);
    assert!(dist2(&placed[1], &[2.0, 1.0]) < 1e-12);
}

#[test]
fn local_projection_of_one_cluster_is_compact() {
    let (points, labels) = separable(100, 13);
    let cfg = ProjectionConfig::global();
    let g = fuzzy_knn(&points, cfg.k, None, cfg.supervision).unwrap();
    let global = layout(&g, &cfg).unwrap();
    let centroid = |c: u32| {
        let pts: Vec<&[f64; 2]> = global.coords.iter().zip(&labels).filter(|x| *x.1 == c).map(|x| x.0).collect();
        let n = pts.len() as f64;
        [pts.iter().map(|p| p[0]).sum::<f64>() / n, pts.iter().map(|p| p[1]).sum::<f64>() / n]
    };
    let cents: Vec<[f64; 2]> = (1..=3).map(centroid).collect();
    let cross = dist2(&cents[0], &cents[1]).min(dist2(&cents[0], &cents[2])).min(dist2(&cents[1], &cents[2]));

    let subset: Vec<Vec<f64>> = points.iter().zip(&labels).filter(|x| *x.1 == 1).map(|x| x.0.clone()).collect();
    let local = local_reproject(&subset, None, &ProjectionConfig::local()).unwrap();
    let mut diameter: f64 = 0.0;
    for a in &local.coords {
        for b in &local.coords {
            diameter = diameter.max(dist2(a, b));
        }
    }
    assert!(diameter < cross, "local diameter {diameter} vs cross-cluster {cross}");
    assert_eq!(local_reproject(&subset, None, &ProjectionConfig::local()).unwrap(), local);
    assert!(local_reproject(&subset[..5], None, &ProjectionConfig::local()).is_err());
}

#[test]
fn supervision_pulls_same_label_pairs_together() {
    // Overlapping clusters so the kNN graph has cross-label pairs.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let centers = random_centers(3, 64, 0.05, &mut rng);
    let (points, labels) = gaussian_clusters(&centers, 60, 0.2, &mut rng);
    let labels: Vec<Option<u32>> = labels.into_iter().map(Some).collect();
    let cfg = ProjectionConfig::global();
    let g = fuzzy_knn(&points, cfg.k, Some(&labels), cfg.supervision).unwrap();
    let l = layout(&g, &cfg).unwrap();
    let (mut same, mut ns, mut diff, mut nd) = (0.0, 0, 0.0, 0);
    for (i, nbrs) in g.knn.iter().enumerate() {
        for &(j, _) in nbrs {
            let d = dist2(&l.coords[i], &l.coords[j]);
            if labels[i] == labels[j] {
                same += d;
                ns += 1;
            } else {
                diff += d;
                nd += 1;
            }
        }
    }
    assert!(nd > 0);
    assert!((same / ns as f64) < (diff / nd as f64));
}
