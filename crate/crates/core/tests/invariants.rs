use ndarray::{Array1, Array2, Array3};
use proptest::prelude::*;

use sheaf_ode::data::{make_windows, window_count};
use sheaf_ode::graphs::{generate_small_world, granger_prior, BrainGraph};
use sheaf_ode::metrics::{dtw_normalized, mse};
use sheaf_ode::sheaf::{message_pass, sheaf_laplacian_apply, SheafParameters};
use sheaf_ode::training::loss_sparse;

fn values(len: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, len)
}

/// Graph over `n` nodes with random parameters for every edge.
fn sheaf_instance() -> impl Strategy<Value = (BrainGraph, SheafParameters, Array2<f64>)> {
    (2usize..7, 1usize..4, 1usize..4, any::<bool>()).prop_flat_map(|(n, d, m, normalize)| {
        let pairs: Vec<(usize, usize)> =
            (0..n).flat_map(|s| (0..n).filter(move |&t| t != s).map(move |t| (s, t))).collect();
        prop::sample::subsequence(pairs.clone(), 0..=pairs.len()).prop_flat_map(move |edges| {
            let e = edges.len();
            (
                Just(edges),
                prop::collection::vec(-1.0f64..1.0, e * m * d),
                prop::collection::vec(-1.0f64..1.0, e * m * d),
                prop::collection::vec(-1.0f64..1.0, m),
                prop::collection::vec(-1.0f64..1.0, n * d),
            )
                .prop_map(move |(edges, src, dst, att, h)| {
                    let e = edges.len();
                    let graph = BrainGraph::new(n, edges).unwrap();
                    let mut p = SheafParameters::identity(e, d, m, 2, normalize);
                    p.rho_src = Array3::from_shape_vec((e, m, d), src).unwrap();
                    p.rho_dst = Array3::from_shape_vec((e, m, d), dst).unwrap();
                    p.attention = Array1::from(att);
                    (graph, p, Array2::from_shape_vec((n, d), h).unwrap())
                })
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dtw_is_symmetric_nonnegative_and_zero_on_itself(a in values(1..=12), b in values(1..=12)) {
        let ab = dtw_normalized(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - dtw_normalized(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert_eq!(dtw_normalized(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn dtw_is_bounded_by_the_largest_pointwise_gap(a in values(1..=10), b in values(1..=10)) {
        let gap = a.iter().flat_map(|x| b.iter().map(move |y| (x - y).abs())).fold(0.0, f64::max);
        prop_assert!(dtw_normalized(&a, &b).unwrap() <= gap + 1e-12);
    }

    #[test]
    fn sparse_penalty_is_absolutely_homogeneous(v in values(1..=24), c in -4.0f64..4.0) {
        let deltas = Array2::from_shape_vec((1, v.len()), v).unwrap();
        let scaled = deltas.mapv(|x| c * x);
        let lhs = loss_sparse(scaled.view());
        let rhs = c.abs() * loss_sparse(deltas.view());
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs));
    }

    #[test]
    fn mse_is_zero_only_on_equal_inputs(v in values(1..=20), shift in 0.01f64..3.0) {
        let a = Array2::from_shape_vec((1, v.len()), v).unwrap();
        prop_assert_eq!(mse(a.view(), a.view()).unwrap(), 0.0);
        let b = a.mapv(|x| x + shift);
        prop_assert!((mse(a.view(), b.view()).unwrap() - shift * shift).abs() <= 1e-9);
    }

    #[test]
    fn message_passing_commutes_with_node_relabeling(
        (graph, params, h) in sheaf_instance(),
        seed in any::<u64>(),
    ) {
        let n = graph.n_nodes;
        let mut perm: Vec<usize> = (0..n).collect();
        let mut state = seed;
        for i in (1..n).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (state >> 33) as usize % (i + 1));
        }
        let relabeled = BrainGraph::new(n, graph.edges.iter().map(|&(s, t)| (perm[s], perm[t])).collect()).unwrap();
        let mut h_perm = Array2::zeros(h.dim());
        for i in 0..n {
            h_perm.row_mut(perm[i]).assign(&h.row(i));
        }
        let out = message_pass(&h, &params, &graph).unwrap();
        let out_perm = message_pass(&h_perm, &params, &relabeled).unwrap();
        for i in 0..n {
            for k in 0..h.ncols() {
                prop_assert!((out[[i, k]] - out_perm[[perm[i], k]]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn laplacian_is_linear_in_the_stalks((graph, mut params, h) in sheaf_instance(), c in -3.0f64..3.0) {
        // With constant attention the operator is linear.
        params.attention_mode = sheaf_ode::sheaf::AttentionMode::Fixed(0.7);
        let base = sheaf_laplacian_apply(&h, &params, &graph).unwrap();
        let scaled = sheaf_laplacian_apply(&h.mapv(|v| c * v), &params, &graph).unwrap();
        for (x, y) in base.iter().zip(scaled.iter()) {
            prop_assert!((c * x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn small_world_has_n_k_over_2_distinct_edges(
        n in 5usize..40,
        half in 1usize..3,
        beta in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let k = 2 * half;
        let g = generate_small_world(n, k, beta, seed).unwrap();
        prop_assert_eq!(g.n_edges(), n * k / 2);
        prop_assert!(BrainGraph::new(n, g.edges.clone()).is_ok());
    }

    #[test]
    fn prior_in_degree_never_exceeds_top_k(
        n in 2usize..6,
        top_k in 1usize..4,
        v in prop::collection::vec(-1.0f64..1.0, 6 * 40),
    ) {
        let x = Array2::from_shape_vec((6, 40), v).unwrap();
        let x = x.slice(ndarray::s![..n, ..]);
        let prior = granger_prior(x, 2, top_k, 1e-6).unwrap();
        prop_assert!(prior.in_degrees().iter().all(|&d| d <= top_k));
        prop_assert!(prior.edges.iter().all(|&(s, t)| s != t && s < n && t < n));
    }

    #[test]
    fn window_count_matches_generated_windows(t in 6usize..80, t_ctx in 1usize..10, t_hor in 1usize..6, stride in 1usize..12) {
        prop_assume!(t >= t_ctx + t_hor);
        let series = Array2::from_shape_fn((2, t), |(i, j)| ((i + 1) * j) as f64 + (j as f64).sin());
        let windows = make_windows(series.view(), t_ctx, t_hor, stride).unwrap();
        prop_assert_eq!(windows.len(), window_count(t, t_ctx, t_hor, stride));
        for w in &windows {
            prop_assert_eq!(w.context.dim(), (2, t_ctx));
            prop_assert_eq!(w.horizon.dim(), (2, t_hor));
        }
    }
}
