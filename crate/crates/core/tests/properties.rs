use locmoe::capacity::{empirical_capacity, p_delta, CapacityTheoryInput};
use locmoe::commsim::{alltoall_cost, build_volume_matrix, groupwise_alltoall_cost};
use locmoe::losses::{aux_loss, locality_loss, ExpertDistribution};
use locmoe::router::{apply_capacity, fnv1a64, hash_route, route_top1, softmax, RoutingOutcome};
use locmoe::topology::{ClusterTopology, ExpertPlacement};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn scores(t: usize, n: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-5.0f64..5.0, t * n).prop_map(move |v| Array2::from_shape_vec((t, n), v).unwrap())
}

fn outcome_for(experts: Vec<usize>, n: usize) -> RoutingOutcome {
    let t = experts.len();
    let mut f = vec![0.0; n];
    for &e in &experts {
        f[e] += 1.0 / t as f64;
    }
    RoutingOutcome { expert_of_token: experts, gate_value: vec![1.0; t], dropped: vec![false; t], p: f.clone(), f }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..32)) {
        let p = softmax(Array1::from(v.clone()).view());
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn top1_picks_the_first_maximum(s in scores(12, 6)) {
        let out = route_top1(s.view()).unwrap();
        for (m, &e) in out.expert_of_token.iter().enumerate() {
            let row = s.row(m);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(row[e], max);
            prop_assert!(row.iter().take(e).all(|&v| v < max));
        }
        prop_assert!((out.f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((out.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn capacity_keeps_the_earliest_tokens(experts in prop::collection::vec(0usize..5, 1..60), cap in 1usize..8) {
        let out = apply_capacity(&outcome_for(experts.clone(), 5), cap).unwrap();
        let mut seen = [0usize; 5];
        for (m, &e) in experts.iter().enumerate() {
            prop_assert_eq!(out.dropped[m], seen[e] >= cap);
            seen[e] += 1;
        }
        prop_assert!(out.served_counts().iter().all(|&c| c <= cap));
        // f and P describe routing before any drop
        prop_assert_eq!(&out.f, &outcome_for(experts, 5).f);
    }

    #[test]
    fn capacity_formula(b in 1usize..5000, cf in 0.1f64..4.0, ep in 1usize..8, n in 1usize..64) {
        let cap = empirical_capacity(b, cf, ep, n).unwrap();
        let exact = b as f64 * cf / (ep * n) as f64;
        prop_assert!(cap as f64 >= exact - 1e-9 && (cap as f64) < exact + 1.0);
    }

    #[test]
    fn hash_routing_is_stable(ids in prop::collection::vec(any::<u64>(), 1..40), n in 1usize..32) {
        let a = hash_route(&ids, n).unwrap();
        prop_assert_eq!(&a, &hash_route(&ids, n).unwrap());
        for (id, e) in ids.iter().zip(&a.expert_of_token) {
            prop_assert_eq!(*e as u64, fnv1a64(*id) % n as u64);
        }
    }

    #[test]
    fn aux_loss_is_minimised_by_balance(f in simplex(8), p in simplex(8)) {
        let alpha = 0.01;
        prop_assert!(aux_loss(&f, &f, alpha).unwrap() >= alpha - 1e-12);
        let l = aux_loss(&f, &p, alpha).unwrap();
        prop_assert!(l >= 0.0 && l <= alpha * 8.0 + 1e-12);
    }

    #[test]
    fn locality_loss_is_a_divergence(c in simplex(6), l in simplex(6)) {
        let dc = ExpertDistribution::new(c).unwrap();
        let dl = ExpertDistribution::new(l).unwrap();
        prop_assert!(locality_loss(&dc, &dl, 0.5).unwrap() >= 0.0);
        prop_assert!(locality_loss(&dc, &dc, 0.5).unwrap().abs() < 1e-12);
    }

    #[test]
    fn p_delta_is_decreasing(a in 0.01f64..0.98, gap in 0.001f64..0.02, dim in 3usize..2000) {
        let lo = p_delta(&CapacityTheoryInput::new(a, dim, 1).unwrap()).unwrap();
        let hi = p_delta(&CapacityTheoryInput::new(a + gap, dim, 1).unwrap()).unwrap();
        let wider = p_delta(&CapacityTheoryInput::new(a, dim + 1, 1).unwrap()).unwrap();
        prop_assert!(hi <= lo && wider <= lo);
        // deep in the tail both sides underflow to zero
        if lo > 1e-250 {
            prop_assert!(hi < lo && wider < lo);
        }
    }

    #[test]
    fn alltoall_is_monotone_in_each_entry(
        v in prop::collection::vec(0.0f64..1e7, 64),
        idx in 0usize..64,
        bump in 1.0f64..1e7,
    ) {
        let topo = ClusterTopology { n_nodes: 2, devices_per_node: 4, ..ClusterTopology::default() };
        let base = Array2::from_shape_vec((8, 8), v).unwrap();
        let mut more = base.clone();
        more[[idx / 8, idx % 8]] += bump;
        prop_assert!(alltoall_cost(more.view(), &topo).unwrap() >= alltoall_cost(base.view(), &topo).unwrap());
    }

    #[test]
    fn alltoall_is_linear_without_latency(v in prop::collection::vec(0.0f64..1e7, 64)) {
        let topo = ClusterTopology {
            n_nodes: 2,
            devices_per_node: 4,
            intra_latency: 0.0,
            inter_latency: 0.0,
            ..ClusterTopology::default()
        };
        let m = Array2::from_shape_vec((8, 8), v).unwrap();
        let doubled = &m * 2.0;
        prop_assert_eq!(alltoall_cost(doubled.view(), &topo).unwrap(), 2.0 * alltoall_cost(m.view(), &topo).unwrap());
    }

    #[test]
    fn groupwise_conserves_bytes(v in prop::collection::vec(0.0f64..1e7, 256), g in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let topo = ClusterTopology::default();
        let m = Array2::from_shape_vec((16, 16), v).unwrap();
        let (secs, plan) = groupwise_alltoall_cost(m.view(), &topo, g).unwrap();
        let total = m.sum();
        let phases = plan.phase_bytes();
        prop_assert!((phases - (total - plan.deferred_bytes + plan.replication_bytes)).abs() <= 1e-6 * total.max(1.0));
        prop_assert!((plan.deferred_bytes - plan.replication_bytes).abs() <= 1e-6 * total.max(1.0));
        if g == 1 {
            prop_assert_eq!(secs, alltoall_cost(m.view(), &topo).unwrap());
        }
    }

    #[test]
    fn volume_matrix_counts_served_tokens(experts in prop::collection::vec(0usize..16, 1..80), cap in 1usize..10) {
        let topo = ClusterTopology::default();
        let placement = ExpertPlacement::blocked(16, &topo);
        let out = apply_capacity(&outcome_for(experts.clone(), 16), cap).unwrap();
        let src: Vec<usize> = (0..experts.len()).map(|m| (m * 7) % 16).collect();
        let v = build_volume_matrix(&out, &placement, &topo, 10.0, &src).unwrap();
        let served = out.served_counts().iter().sum::<usize>();
        prop_assert_eq!(v.sum(), served as f64 * 10.0);
    }
}
