use iwflow::density::{kde_log_density, knn_log_density, mgf_log_density};
use iwflow::diversity::{objective_grad_finals, objective_value, scale_to_velocity, DiversityConfig, Objective, PairwiseK};
use iwflow::gmm::{circle_mixture, GmmSpec, WeightMode};
use iwflow::metrics::{graded_ap, js_divergence, kendall_tau_b, representation_error, spearman_rho};
use iwflow::nnet::{Activation, VelocityNet};
use iwflow::rectflow::{BaseVelocity, FlowModel, GmmVelocity, TimeGrid};
use iwflow::sampler::{sample_joint, JointConfig, RegOrder, TrialSeed};
use iwflow::scorereg::{regularize, RegMode};
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn points(n: usize, d: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-2.0f64..2.0, n * d).prop_map(move |v| Array2::from_shape_vec((n, d), v).unwrap())
}

fn small_spec() -> GmmSpec {
    GmmSpec::new(
        vec![0.2, 0.5, 0.3],
        vec![vec![0.0, 1.0], vec![1.5, -0.5], vec![-1.0, -1.0]],
        vec![vec![0.4, 0.3], vec![0.5, 0.5], vec![0.3, 0.6]],
    )
    .unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mixture_score_matches_finite_differences(x in -3.0f64..3.0, y in -3.0f64..3.0) {
        let spec = small_spec();
        let s = spec.score(&[x, y]);
        let h = 1e-5;
        for l in 0..2 {
            let mut a = [x, y];
            let mut b = [x, y];
            a[l] += h;
            b[l] -= h;
            let fd = (spec.log_density(&a) - spec.log_density(&b)) / (2.0 * h);
            prop_assert!((s[l] - fd).abs() <= 1e-5 * (1.0 + s[l].abs()), "{} vs {}", s[l], fd);
        }
    }

    #[test]
    fn nearest_mode_is_translation_invariant(x in -3.0f64..3.0, y in -3.0f64..3.0, dx in -5.0f64..5.0, dy in -5.0f64..5.0) {
        let spec = small_spec();
        let shifted = GmmSpec::new(
            spec.weights().to_vec(),
            spec.means().iter().map(|m| vec![m[0] + dx, m[1] + dy]).collect(),
            spec.stds().to_vec(),
        ).unwrap();
        prop_assert_eq!(spec.nearest_mode(&[x, y]), shifted.nearest_mode(&[x + dx, y + dy]));
    }

    #[test]
    fn network_input_gradient_and_trace_match_finite_differences(
        seed in 0u64..1000, x in prop::collection::vec(-2.0f64..2.0, 3), t in 0.0f64..1.0,
    ) {
        let net = VelocityNet::new(3, &[12, 12], Activation::Tanh, &mut ChaCha8Rng::seed_from_u64(seed));
        let h = 1e-5;
        let mut trace_fd = 0.0;
        for l in 0..3 {
            let mut e = [0.0; 3];
            e[l] = 1.0;
            let grad = net.vjp_input(&x, t, &e);
            for m in 0..3 {
                let mut a = x.clone();
                let mut b = x.clone();
                a[m] += h;
                b[m] -= h;
                let fd = (net.forward(&a, t).unwrap()[l] - net.forward(&b, t).unwrap()[l]) / (2.0 * h);
                prop_assert!((grad[m] - fd).abs() <= 1e-6 * (1.0 + fd.abs()));
                if m == l {
                    trace_fd += fd;
                }
            }
        }
        let trace = net.jacobian_trace(&x, t).unwrap();
        prop_assert!((trace - trace_fd).abs() <= 1e-6 * (1.0 + trace.abs()));
    }

    #[test]
    fn network_parameter_gradient_matches_finite_differences(seed in 0u64..1000, k in 0usize..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = VelocityNet::new(2, &[8, 8], Activation::Silu, &mut rng);
        let xs = Array2::from_shape_fn((5, 2), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        let ts = [0.1, 0.3, 0.5, 0.7, 0.9];
        let targets = Array2::from_shape_fn((5, 2), |(i, j)| ((i + 2 * j) as f64 * 0.91).cos());
        let (_, grad) = net.loss_and_grad(xs.view(), &ts, targets.view());
        let k = k % net.n_params();
        let h = 1e-5;
        let orig = net.params()[k];
        net.params_mut()[k] = orig + h;
        let up = net.loss(xs.view(), &ts, targets.view());
        net.params_mut()[k] = orig - h;
        let down = net.loss(xs.view(), &ts, targets.view());
        let fd = (up - down) / (2.0 * h);
        prop_assert!((grad[k] - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "{} vs {}", grad[k], fd);
    }

    #[test]
    fn diversity_is_exchangeable_and_translation_invariant(x in points(5, 2), shift in -3.0f64..3.0, obj in 0usize..6) {
        let objective = [Objective::Dpp, Objective::HarmonicDpp, Objective::Pg, Objective::Chebyshev, Objective::LogBarrier, Objective::Reciprocal][obj];
        let cfg = DiversityConfig { objective, ..DiversityConfig::default() };
        let Ok((h, g)) = objective_grad_finals(x.view(), &cfg) else { return Ok(()) };
        let perm = [3, 0, 4, 1, 2];
        let xp = Array2::from_shape_fn((5, 2), |(i, l)| x[[perm[i], l]]);
        let (hp, gp) = objective_grad_finals(xp.view(), &cfg).unwrap();
        prop_assert!((h - hp).abs() <= 1e-8 * (1.0 + h.abs()));
        for i in 0..5 {
            for l in 0..2 {
                prop_assert!((gp[[i, l]] - g[[perm[i], l]]).abs() <= 1e-7 * (1.0 + g[[perm[i], l]].abs()));
            }
        }
        // The harmonic DPP reads coordinates directly, so it is exempt.
        if objective != Objective::HarmonicDpp {
            let xs = x.mapv(|v| v + shift);
            let (hs, _) = objective_grad_finals(xs.view(), &cfg).unwrap();
            prop_assert!((h - hs).abs() <= 1e-6 * (1.0 + h.abs()));
        }
    }

    #[test]
    fn separating_a_pair_does_not_decrease_diversity(gap in 0.05f64..2.0, extra in 0.01f64..1.0, obj in 0usize..4) {
        let objective = [Objective::Dpp, Objective::Pg, Objective::LogBarrier, Objective::Reciprocal][obj];
        let cfg = DiversityConfig { objective, ..DiversityConfig::default() };
        // A lone pair with the normalizing median frozen at 1.
        let value = |g: f64| {
            let x = Array2::from_shape_vec((2, 1), vec![0.0, g]).unwrap();
            let d = Array2::from_shape_vec((2, 2), vec![0.0, g * g, g * g, 0.0]).unwrap();
            let pk = PairwiseK { k: d.clone(), d, median: 1.0 };
            objective_value(&pk, x.view(), &cfg).unwrap()
        };
        let (a, b) = (value(gap), value(gap + extra));
        prop_assert!(b >= a - 1e-12, "{objective}: {a} -> {b}");
    }

    #[test]
    fn scaled_velocity_norm_identity(g in points(4, 3), v in points(4, 3), t in 0.0f64..0.99, lambda in 0.01f64..3.0) {
        let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assume!(gn > 1e-6);
        let u = scale_to_velocity(g.view(), v.view(), t, lambda);
        let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let want = lambda * (1.0 - t).sqrt() * vn;
        prop_assert!((un - want).abs() <= 1e-10 * (1.0 + want));
    }

    #[test]
    fn regularization_shrinks_and_is_idempotent(
        g in prop::collection::vec(-3.0f64..3.0, 4), s in prop::collection::vec(-3.0f64..3.0, 4), t in 0.0f64..1.0, mode in 0usize..3,
    ) {
        let mode = RegMode::ALL[mode];
        let r = regularize(&g, &s, t, mode).unwrap();
        prop_assert!(norm(&r) <= norm(&g) + 1e-12);
        let dot = |a: &[f64]| a.iter().zip(&s).map(|(x, y)| x * y).sum::<f64>();
        if mode == RegMode::Hard && norm(&s) > 1e-12 {
            prop_assert!(dot(&r) >= -1e-10 * (1.0 + norm(&g) * norm(&s)));
            let again = regularize(&r, &s, t, mode).unwrap();
            for (a, b) in again.iter().zip(&r) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
        if dot(&g) >= 0.0 {
            prop_assert_eq!(r, g);
        }
    }

    #[test]
    fn rank_metrics_are_bounded_and_invariant_to_monotone_maps(
        pred in prop::collection::vec(-5.0f64..5.0, 3..12), seed in 0u64..100,
    ) {
        let truth: Vec<f64> = pred.iter().enumerate().map(|(i, p)| p.sin() + (i as f64 * seed as f64).cos()).collect();
        let tau = kendall_tau_b(&pred, &truth).unwrap();
        let rho = spearman_rho(&pred, &truth).unwrap().rho;
        prop_assert!((-1.0..=1.0).contains(&tau) || tau.is_nan());
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&rho.abs()) || rho.is_nan());
        let mapped: Vec<f64> = pred.iter().map(|p| p.exp() * 3.0 + 1.0).collect();
        let tau2 = kendall_tau_b(&mapped, &truth).unwrap();
        prop_assert!(tau == tau2 || (tau.is_nan() && tau2.is_nan()));
        let grades: Vec<f64> = truth.iter().map(|t| t.exp()).collect();
        let ap = graded_ap(&pred, &grades).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
        prop_assert!((ap - graded_ap(&mapped, &grades).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn js_is_symmetric_and_bounded(p in prop::collection::vec(0.0f64..1.0, 5), q in prop::collection::vec(0.0f64..1.0, 5)) {
        let ps: f64 = p.iter().sum();
        let qs: f64 = q.iter().sum();
        prop_assume!(ps > 1e-6 && qs > 1e-6);
        let p: Vec<f64> = p.iter().map(|x| x / ps).collect();
        let q: Vec<f64> = q.iter().map(|x| x / qs).collect();
        let a = js_divergence(&p, &q).unwrap();
        let b = js_divergence(&q, &p).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!((-1e-12..=std::f64::consts::LN_2 + 1e-12).contains(&a));
    }

    #[test]
    fn representation_error_does_not_grow_with_more_samples(reference in points(20, 2), rep in points(6, 2), extra in points(3, 2)) {
        let id = |x: &[f64]| x.to_vec();
        let base = representation_error(reference.view(), rep.view(), id).unwrap();
        let bigger = ndarray::concatenate(ndarray::Axis(0), &[rep.view(), extra.view()]).unwrap();
        let more = representation_error(reference.view(), bigger.view(), id).unwrap();
        prop_assert!(more <= base);
    }

    #[test]
    fn density_baselines_are_permutation_invariant(pool in points(12, 2), rot in 1usize..12) {
        let rotated = Array2::from_shape_fn((12, 2), |(i, l)| pool[[(i + rot) % 12, l]]);
        let x = [0.3, -0.2];
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs());
        prop_assert!(close(knn_log_density(pool.view(), &x, 5).unwrap(), knn_log_density(rotated.view(), &x, 5).unwrap()));
        prop_assert!(close(kde_log_density(pool.view(), &x).unwrap(), kde_log_density(rotated.view(), &x).unwrap()));
        if let (Ok(a), Ok(b)) = (mgf_log_density(pool.view(), &x), mgf_log_density(rotated.view(), &x)) {
            prop_assert!(close(a, b));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn joint_sets_replay_and_are_exchangeable(seed in 0u64..1000, order in 0usize..2) {
        let spec = circle_mixture(5, 2, 1.0, 0.05, 0.05, WeightMode::Uniform).unwrap();
        let model = FlowModel::new(BaseVelocity::Exact(GmmVelocity::new(spec)));
        let grid = TimeGrid::uniform(15).unwrap();
        let cfg = JointConfig {
            diversity: DiversityConfig::default(),
            reg: RegMode::Soft,
            order: [RegOrder::BeforeScaling, RegOrder::AfterScaling][order],
        };
        let set = sample_joint(&model, 5, &grid, &cfg, TrialSeed::new(seed, 0)).unwrap();
        prop_assert!(set.replay_matches());

        // Permuting the initial noise permutes the trajectories.
        let perm = [2, 4, 0, 1, 3];
        let x0 = set.initial().to_owned();
        let px0 = Array2::from_shape_fn(x0.dim(), |(i, l)| x0[[perm[i], l]]);
        let permuted = iwflow::sampler::sample_joint_from(&model, px0, &grid, &cfg, TrialSeed::new(seed, 0)).unwrap();
        let f = set.finals();
        let pf = permuted.finals();
        for i in 0..5 {
            for l in 0..2 {
                prop_assert!((pf[[i, l]] - f[[perm[i], l]]).abs() <= 1e-9);
            }
        }
    }
}
