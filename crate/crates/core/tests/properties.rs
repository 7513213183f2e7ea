use std::sync::Arc;

use proptest::prelude::*;

use gae_distill::autodiff::Tape;
use gae_distill::checkpoint;
use gae_distill::eval::{auc_pairwise, auc_ranked, average_precision, graph_readout, linear_probe, ranking_metrics, Pooling};
use gae_distill::graph::{Graph, Split};
use gae_distill::losses::{cosine_sim, kl_distill_loss, mean_neighbor_similarity, reconstruction_loss, ReconKind};
use gae_distill::model::{mask_count, mask_nodes, GaeModel};
use gae_distill::Tensor;

fn features(n: usize, f: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, n * f).prop_map(move |v| Tensor::from_vec(n, f, v).unwrap())
}

prop_compose! {
    fn graph_strategy(max_nodes: usize, f: usize)
        (n in 2..=max_nodes)
        (edges in prop::collection::vec((0..n, 0..n), 0..(3 * n)), x in features(n, f), n in Just(n))
        -> Graph {
        Graph::from_edges(n, &edges, x).unwrap()
    }
}

prop_compose! {
    fn graph_and_perm(max_nodes: usize, f: usize)
        (g in graph_strategy(max_nodes, f))
        (perm in Just((0..g.num_nodes()).collect::<Vec<_>>()).prop_shuffle(), g in Just(g))
        -> (Graph, Vec<usize>) {
        (g, perm)
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn csr_is_symmetric_sorted_and_loop_free(g in graph_strategy(12, 2)) {
        prop_assert!(g.validate().is_ok());
        prop_assert!(!g.has_self_loops());
        prop_assert_eq!(g.num_edges() % 2, 0);
        for v in 0..g.num_nodes() {
            let nb = g.neighbors(v);
            prop_assert!(nb.windows(2).all(|w| w[0] < w[1]));
            for &u in nb {
                prop_assert!(g.has_edge(u, v));
            }
        }
    }

    #[test]
    fn self_loops_idempotent_and_operator_symmetric(g in graph_strategy(10, 2)) {
        let once = g.add_self_loops();
        let twice = once.add_self_loops();
        prop_assert_eq!(once.offsets(), twice.offsets());
        prop_assert_eq!(once.targets(), twice.targets());
        let a = once.normalized_adjacency().to_dense();
        prop_assert!(a.max_abs_diff(&a.transpose()) < 1e-15);
    }

    #[test]
    fn similarity_is_bounded_and_equivariant((g, perm) in graph_and_perm(10, 3)) {
        let r = mean_neighbor_similarity(g.features(), &g);
        let p = g.permute(&perm).unwrap();
        let rp = mean_neighbor_similarity(p.features(), &p);
        prop_assert!((r.mean - rp.mean).abs() < 1e-12);
        for v in 0..g.num_nodes() {
            match (r.per_node[v], rp.per_node[perm[v]]) {
                (Some(a), Some(b)) => {
                    prop_assert!((-1.0..=1.0).contains(&a));
                    prop_assert!((a - b).abs() < 1e-12);
                }
                (None, None) => prop_assert_eq!(g.degree(v), 0),
                _ => prop_assert!(false, "isolation differs after permutation"),
            }
        }
    }

    #[test]
    fn cosine_is_bounded(u in prop::collection::vec(-1e3f64..1e3, 4), v in prop::collection::vec(-1e3f64..1e3, 4)) {
        let c = cosine_sim(&u, &v);
        prop_assert!((-1.0..=1.0).contains(&c));
    }

    #[test]
    fn mask_keeps_unmasked_rows(g in graph_strategy(15, 3), lambda in 0.0f64..=1.0, seed in any::<u64>()) {
        let token = Tensor::from_rows(&[vec![7.0, -7.0, 0.5]]).unwrap();
        let (x, plan) = mask_nodes(&g, lambda, &token, seed).unwrap();
        prop_assert_eq!(plan.masked_ids.len(), mask_count(g.num_nodes(), lambda));
        prop_assert!(plan.masked_ids.windows(2).all(|w| w[0] < w[1]));
        for v in 0..g.num_nodes() {
            let expected = if plan.masked_ids.binary_search(&v).is_ok() { token.row(0) } else { g.features().row(v) };
            prop_assert_eq!(x.row(v), expected);
        }
        prop_assert_eq!(mask_nodes(&g, lambda, &token, seed).unwrap().0, x);
    }

    #[test]
    fn kl_nonnegative_zero_on_identity(g in graph_strategy(10, 3), noise in features(10, 3), tau in 0.1f64..5.0) {
        let x = g.features();
        prop_assert_eq!(kl_distill_loss(x, x, &g, tau).unwrap(), 0.0);
        let recon = noise.select_rows(&(0..g.num_nodes()).collect::<Vec<_>>());
        prop_assert!(kl_distill_loss(x, &recon, &g, tau).unwrap() >= 0.0);
    }

    #[test]
    fn kl_ignores_positive_row_rescaling(g in graph_strategy(10, 3), noise in features(10, 3), row in 0usize..10, c in 0.01f64..100.0) {
        let n = g.num_nodes();
        let row = row % n;
        let recon = noise.select_rows(&(0..n).collect::<Vec<_>>());
        let mut scaled = g.features().clone();
        for v in scaled.row_mut(row) {
            *v *= c;
        }
        let a = kl_distill_loss(g.features(), &recon, &g, 1.0).unwrap();
        let b = kl_distill_loss(&scaled, &recon, &g, 1.0).unwrap();
        prop_assert!((a - b).abs() < 1e-10, "{} vs {}", a, b);
    }

    #[test]
    fn sce_is_scale_invariant_and_mse_is_not(x in features(4, 3), y in features(4, 3), c in 1.5f64..10.0) {
        prop_assume!((0..4).all(|i| x.row(i).iter().any(|v| v.abs() > 1e-3) && y.row(i).iter().any(|v| v.abs() > 1e-3)));
        let eval = |kind: ReconKind, recon: &Tensor| {
            let mut t = Tape::new();
            let a = t.constant(x.clone());
            let b = t.constant(recon.clone());
            let l = reconstruction_loss(&mut t, a, b, kind, 2.0).unwrap();
            t.value(l).item()
        };
        let scaled = y.map(|v| v * c);
        prop_assert!((eval(ReconKind::Sce, &y) - eval(ReconKind::Sce, &scaled)).abs() < 1e-10);
        prop_assert!(eval(ReconKind::Sce, &y) >= 0.0);
        let mse_diff = (eval(ReconKind::Mse, &y) - eval(ReconKind::Mse, &scaled)).abs();
        prop_assert!(mse_diff > 0.0);
    }

    #[test]
    fn segment_softmax_is_a_distribution(vals in prop::collection::vec(-30.0f64..30.0, 1..20), cut in 0usize..20) {
        let n = vals.len();
        let cut = cut % n;
        let segments: Vec<usize> = (0..n).map(|i| usize::from(i >= cut)).collect();
        let mut t = Tape::new();
        let x = t.constant(Tensor::column(vals));
        let p = t.segment_softmax(x, &segments, 2).unwrap();
        let p = t.value(p);
        let sums = [0, 1].map(|s| (0..n).filter(|&i| segments[i] == s).map(|i| p.data()[i]).sum::<f64>());
        for (s, total) in sums.iter().enumerate() {
            if segments.contains(&s) {
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn auc_invariant_under_monotone_maps(pos in prop::collection::vec(-5.0f64..5.0, 1..20), neg in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let (auc, ap) = ranking_metrics(&pos, &neg).unwrap();
        prop_assert!((0.0..=1.0).contains(&auc));
        prop_assert!(ap > 0.0 && ap <= 1.0);
        prop_assert!((auc - auc_ranked(&pos, &neg).unwrap()).abs() < 1e-12);
        let f = |v: &f64| (2.0 * v).exp() + 3.0;
        let (pos2, neg2): (Vec<f64>, Vec<f64>) = (pos.iter().map(f).collect(), neg.iter().map(f).collect());
        prop_assert!((auc - auc_pairwise(&pos2, &neg2).unwrap()).abs() < 1e-12);
        prop_assert!((ap - average_precision(&pos2, &neg2).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn mean_readout_ignores_order_within_graphs(z in features(8, 3), membership in prop::collection::vec(0usize..3, 8), perm in Just((0..8).collect::<Vec<usize>>()).prop_shuffle()) {
        let mut ids = membership.clone();
        ids.sort_unstable();
        ids.dedup();
        prop_assume!(ids == (0..ids.len()).collect::<Vec<_>>());
        let pooled = graph_readout(&z, &membership, Pooling::Mean).unwrap();
        let zp = z.select_rows(&perm);
        let mp: Vec<usize> = perm.iter().map(|&i| membership[i]).collect();
        let pooled_p = graph_readout(&zp, &mp, Pooling::Mean).unwrap();
        prop_assert!(pooled.max_abs_diff(&pooled_p) < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact(f in 1usize..6, h in 1usize..5, seed in any::<u64>(), slope in -1.0f64..1.0) {
        let mut m = GaeModel::new(f, h, seed);
        m.act_slope_dec = slope;
        let back = checkpoint::decode(&checkpoint::encode(&m)).unwrap();
        prop_assert_eq!(checkpoint::encode(&back), checkpoint::encode(&m));
    }

    #[test]
    fn spmm_matches_dense(g in graph_strategy(8, 2)) {
        let adj = Arc::new(g.add_self_loops().normalized_adjacency());
        let mut t = Tape::new();
        let x = t.constant(g.features().clone());
        let y = t.spmm(&adj, x).unwrap();
        let dense = adj.to_dense().matmul(g.features()).unwrap();
        prop_assert!(t.value(y).max_abs_diff(&dense) < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn probe_accuracy_is_a_deterministic_fraction(z in features(24, 3), seed in any::<u64>()) {
        let labels: Vec<usize> = (0..24).map(|i| i % 3).collect();
        let splits: Vec<Split> = (0..24).map(|i| match (i / 3) % 4 { 0 | 1 => Split::Train, 2 => Split::Val, _ => Split::Test }).collect();
        let a = linear_probe(&z, &labels, &splits, seed).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert_eq!(a, linear_probe(&z, &labels, &splits, seed).unwrap());
    }
}
