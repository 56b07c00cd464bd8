use centro_core::metrics::{euclidean_mean, pearson, wasserstein2_to_dirac};
use centro_core::rng::seeded;
use centro_core::{
    ice_normalize, load_map, save_map, simulate_map, BoxPrior, ContactMap, GenomeSpec, IceOptions, MapMeta,
};
use proptest::prelude::*;

const R: u64 = 1000;

fn genome_strategy() -> impl Strategy<Value = GenomeSpec> {
    prop::collection::vec(3u64..12, 2..5).prop_map(|bins| {
        let lengths: Vec<u64> = bins.iter().map(|b| b * R).collect();
        GenomeSpec::from_lengths(R, &lengths).unwrap()
    })
}

fn genome_and_theta() -> impl Strategy<Value = (GenomeSpec, Vec<f64>, u64)> {
    genome_strategy().prop_flat_map(|g| {
        let theta: Vec<BoxedStrategy<f64>> = (0..g.num_chromosomes())
            .map(|i| (0.0..g.length(i) as f64).boxed())
            .collect();
        (Just(g), theta, any::<u64>())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn simulated_maps_are_finite_and_non_negative((g, theta, seed) in genome_and_theta()) {
        let map = simulate_map(&g, &theta, &mut seeded(seed)).unwrap();
        prop_assert_eq!(map.blocks().len(), g.num_pairs());
        for ((i, j), b) in g.pairs().zip(map.blocks()) {
            prop_assert_eq!(b.shape(), g.block_shape(i, j).unwrap());
            prop_assert!(b.data().iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    #[test]
    fn simulation_is_a_function_of_the_seed((g, theta, seed) in genome_and_theta()) {
        let a = simulate_map(&g, &theta, &mut seeded(seed)).unwrap();
        let b = simulate_map(&g, &theta, &mut seeded(seed)).unwrap();
        prop_assert_eq!(a.to_symmetric(), b.to_symmetric());
    }

    #[test]
    fn symmetric_layout_round_trips((g, theta, seed) in genome_and_theta()) {
        let map = simulate_map(&g, &theta, &mut seeded(seed)).unwrap();
        let m = map.to_symmetric();
        let n = g.total_bins();
        for a in 0..n {
            for b in 0..n {
                prop_assert_eq!(m[a * n + b], m[b * n + a]);
            }
        }
        let back = ContactMap::from_symmetric(g.clone(), &m).unwrap();
        prop_assert_eq!(back.to_symmetric(), m);
    }

    #[test]
    fn saved_maps_load_unchanged((g, theta, seed) in genome_and_theta()) {
        let map = simulate_map(&g, &theta, &mut seeded(seed)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_map(dir.path(), &map, &MapMeta::for_map(&map)).unwrap();
        let (back, _) = load_map(dir.path(), &g).unwrap();
        prop_assert_eq!(back.to_symmetric(), map.to_symmetric());
    }

    #[test]
    fn bin_centers_map_back_to_their_bin(g in genome_strategy(), frac in 0.0..1.0f64) {
        for i in 0..g.num_chromosomes() {
            let pos = frac * g.length(i) as f64;
            let k = g.bp_to_bin(i, pos).unwrap();
            prop_assert!(k < g.bins(i));
            prop_assert!((g.bin_to_bp(k) - pos).abs() <= R as f64 / 2.0 + 1e-9);
            prop_assert_eq!(g.bp_to_bin(i, g.bin_to_bp(k)).unwrap(), k);
        }
    }

    #[test]
    fn unit_box_round_trips(
        bounds in prop::collection::vec((-1e6..1e6f64, 1.0..1e6f64), 1..6),
        u in prop::collection::vec(0.0..1.0f64, 6),
    ) {
        let prior = BoxPrior::new(
            bounds.iter().map(|b| b.0).collect(),
            bounds.iter().map(|b| b.0 + b.1).collect(),
        );
        let u = &u[..prior.dim()];
        let theta = prior.from_unit(u);
        prop_assert!(prior.contains(&theta));
        for (a, b) in prior.to_unit(&theta).iter().zip(u) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn ice_balances_positive_symmetric_matrices(
        n in 2usize..12,
        raw in prop::collection::vec(0.01..100.0f64, 144),
    ) {
        let mut m = vec![0.0; n * n];
        for a in 0..n {
            for b in a..n {
                m[a * n + b] = raw[a * 12 + b];
                m[b * n + a] = raw[a * 12 + b];
            }
        }
        let res = ice_normalize(&m, n, IceOptions::default()).unwrap();
        prop_assert!(res.converged);
        for a in 0..n {
            let s: f64 = res.matrix[a * n..(a + 1) * n].iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            for b in 0..n {
                prop_assert!((res.matrix[a * n + b] - res.matrix[b * n + a]).abs() < 1e-12);
                let want = m[a * n + b] * res.bias[a] * res.bias[b];
                prop_assert!((res.matrix[a * n + b] - want).abs() <= 1e-9 * want.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn pearson_ignores_positive_affine_maps(
        x in prop::collection::vec(-100.0..100.0f64, 3..40),
        noise in prop::collection::vec(-1.0..1.0f64, 40),
        a in 0.01..100.0f64,
        c in -100.0..100.0f64,
    ) {
        let y: Vec<f64> = x.iter().zip(&noise).map(|(v, e)| v + 10.0 * e).collect();
        let ya: Vec<f64> = y.iter().map(|v| a * v + c).collect();
        if let (Some(p), Some(q)) = (pearson(&x, &y), pearson(&x, &ya)) {
            prop_assert!((p - q).abs() < 1e-9);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&p));
        }
    }

    #[test]
    fn w2_bounds_mean_distance(
        pts in prop::collection::vec(prop::collection::vec(-1e5..1e5f64, 3), 1..30),
        r in prop::collection::vec(-1e5..1e5f64, 3),
    ) {
        let e = euclidean_mean(&pts, &r).unwrap();
        let w = wasserstein2_to_dirac(&pts, &r).unwrap();
        prop_assert!(e >= 0.0);
        prop_assert!(w + 1e-9 * w.max(1.0) >= e);
    }
}
