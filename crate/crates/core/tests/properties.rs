use dpfpl::config::{RunConfig, VariantMode};
use dpfpl::factorization::{factorize, reconstruct_gradient};
use dpfpl::federation::run_training;
use dpfpl::numeric::{gaussian_matrix, Matrix, RngStream};
use dpfpl::privacy::{clip, clip_and_average};
use proptest::prelude::*;

fn shape() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=12, 1usize..=12).prop_flat_map(|(b, d)| (Just(b), Just(d), 1..=b.min(d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn factorization_reconstructs_and_is_orthonormal((b, d, k) in shape(), seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 0);
        let p = gaussian_matrix(b, d, 1.0, &mut rng).unwrap();
        let f = factorize(&p, k, &mut rng).unwrap();
        prop_assert!(f.reconstruct().max_abs_diff(&p).unwrap() <= 1e-9 * (1.0 + p.frobenius_norm()));
        let gram = f.u.t_matmul(&f.u).unwrap();
        prop_assert!(gram.max_abs_diff(&Matrix::identity(k)).unwrap() <= 1e-9);
        // The residual is orthogonal to span(u).
        prop_assert!(f.u.t_matmul(&f.r).unwrap().frobenius_norm() <= 1e-9 * (1.0 + p.frobenius_norm()));
    }

    #[test]
    fn reconstruction_is_linear((b, d, k) in shape(), seed in any::<u64>(), alpha in -3.0f64..3.0) {
        let mut rng = RngStream::new(seed, 1);
        let f = factorize(&gaussian_matrix(b, d, 1.0, &mut rng).unwrap(), k, &mut rng).unwrap();
        let g = |rng: &mut RngStream| (gaussian_matrix(b, k, 1.0, rng).unwrap(), gaussian_matrix(k, d, 1.0, rng).unwrap());
        let (u1, v1) = g(&mut rng);
        let (u2, v2) = g(&mut rng);
        let r = |gu: &Matrix, gv: &Matrix| reconstruct_gradient(gu, gv, &f.u, &f.v).unwrap();
        let mut lhs_u = u1.clone();
        lhs_u.axpy(alpha, &u2).unwrap();
        let mut lhs_v = v1.clone();
        lhs_v.axpy(alpha, &v2).unwrap();
        let lhs = r(&lhs_u, &lhs_v);
        let mut rhs = r(&u1, &v1);
        rhs.axpy(alpha, &r(&u2, &v2)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-9 * (1.0 + rhs.frobenius_norm()));
    }

    #[test]
    fn clipped_mean_stays_in_ball(seed in any::<u64>(), n in 1usize..20, threshold in 0.01f64..50.0, scale in 0.01f64..100.0) {
        let mut rng = RngStream::new(seed, 2);
        let gs: Vec<Matrix> = (0..n).map(|_| gaussian_matrix(3, 5, scale, &mut rng).unwrap()).collect();
        for g in &gs {
            prop_assert!(clip(g, threshold).unwrap().frobenius_norm() <= threshold * (1.0 + 1e-12));
        }
        let m = clip_and_average(&gs, threshold, n).unwrap();
        prop_assert!(m.frobenius_norm() <= threshold * (1.0 + 1e-12));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn run_metrics_are_well_formed(
        seed in 0u64..1000,
        variant in prop::sample::select(VariantMode::ALL.to_vec()),
        epsilon in prop::sample::select(vec![0.01, 0.1, 0.4]),
    ) {
        let mut c = RunConfig::default();
        c.variant = variant;
        c.dims.prompt_len = 4;
        c.dims.token_dim = 8;
        c.dims.num_classes = 4;
        c.dims.rank = 2;
        c.protocol.clients = 2;
        c.protocol.rounds = 4;
        c.protocol.batch_size = 8;
        c.data.per_class_count = 20;
        c.privacy.epsilon = epsilon;
        let out = run_training(&c, seed).map_err(|(e, _)| e).unwrap();
        let mut last = 0.0;
        for m in &out.metrics {
            prop_assert!(m.local_acc.iter().all(|a| (0.0..=1.0).contains(a)));
            prop_assert!(m.neighbor_acc.iter().flatten().all(|a| (0.0..=1.0).contains(a)));
            let eps = m.eps_spent.unwrap();
            prop_assert!(eps >= last && eps <= epsilon);
            last = eps;
        }
        prop_assert_eq!(last, epsilon);
    }
}
