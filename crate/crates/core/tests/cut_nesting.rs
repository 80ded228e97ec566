use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segscape::graph::{build_hierarchy, horizontal_cut, Criterion, Partition};
use segscape::testkit::random_gradient;

const THRESHOLDS: [f64; 5] = [0.5, 1.0, 2.0, 4.0, 8.0];

fn nested(fine: &Partition, coarse: &Partition) -> bool {
    let mut parent = vec![u32::MAX; fine.region_count()];
    for (&f, &c) in fine.labels().iter().zip(coarse.labels()) {
        let slot = &mut parent[f as usize];
        if *slot == u32::MAX {
            *slot = c;
        } else if *slot != c {
            return false;
        }
    }
    true
}

fn check(seed: u64, criterion: Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random_gradient(16, 16, &mut rng);
    let h = build_hierarchy(&g, criterion).unwrap();
    let cuts: Vec<Partition> = THRESHOLDS.iter().map(|&t| horizontal_cut(&h, t).unwrap()).collect();
    for c in &cuts {
        assert_eq!(c.labels().len(), 256);
        assert_eq!(c.regions().iter().map(|r| r.pixel_count).sum::<usize>(), 256);
        assert!(c.is_connected());
    }
    for w in cuts.windows(2) {
        assert!(nested(&w[0], &w[1]));
        assert!(w[1].region_count() <= w[0].region_count());
    }
}

#[test]
fn fifty_images_nest_across_thresholds() {
    for seed in 0..50 {
        for criterion in Criterion::ALL {
            check(seed, criterion);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn any_seed_nests(seed in any::<u64>()) {
        check(seed, Criterion::Volume);
    }
}
