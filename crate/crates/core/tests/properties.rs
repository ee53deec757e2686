use conformal_contraction::conformal::{calibrate, empirical_coverage, quantile_index};
use conformal_contraction::control::{solve_min_norm, FeedbackConstraint};
use conformal_contraction::linalg::{Matrix, Vector};
use conformal_contraction::metric::{riemannian_distance, ContractionMetric};
use conformal_contraction::rng::stream;
use conformal_contraction::systems::BoxSet;
use conformal_contraction::tube::{sample_metric_ball, tighten_state_box, tube_radius, Ellipse2d};
use proptest::prelude::*;

fn spd(n: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| {
        let l = Matrix::from_vec(n, n, v);
        &l * l.transpose() + Matrix::identity(n, n) * 0.2
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantile_is_the_jth_order_statistic(scores in prop::collection::vec(0.0f64..10.0, 1..80), alpha in 0.01f64..0.5) {
        let c = calibrate(&scores, alpha).unwrap();
        let n = scores.len();
        let j = quantile_index(n, alpha);
        prop_assert_eq!(c.quantile_index, j);
        prop_assert!(j as f64 >= (1.0 - alpha) * (n as f64 + 1.0) - 1e-9);
        prop_assert!(((j - 1) as f64) < (1.0 - alpha) * (n as f64 + 1.0));
        if j > n {
            prop_assert!(c.unattainable && c.quantile_value.is_infinite());
        } else {
            let below = scores.iter().filter(|&&s| s <= c.quantile_value).count();
            prop_assert!(below >= j);
            prop_assert!(scores.contains(&c.quantile_value));
        }
    }

    #[test]
    fn quantile_grows_as_alpha_shrinks(scores in prop::collection::vec(0.0f64..10.0, 20..60), a in 0.05f64..0.5, b in 0.05f64..0.5) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(calibrate(&scores, lo).unwrap().quantile_value >= calibrate(&scores, hi).unwrap().quantile_value);
    }

    #[test]
    fn calibration_set_covers_itself(scores in prop::collection::vec(0.0f64..10.0, 20..60), alpha in 0.05f64..0.3) {
        let c = calibrate(&scores, alpha).unwrap();
        prop_assert!(empirical_coverage(&scores, c.quantile_value) >= 1.0 - alpha - 1.0 / scores.len() as f64);
    }

    #[test]
    fn radius_is_monotone(s1 in 0.0f64..5.0, s2 in 0.0f64..5.0, l1 in 0.1f64..3.0, l2 in 0.1f64..3.0, m in spd(3)) {
        let at = |lambda: f64| ContractionMetric::constant(m.clone(), lambda).unwrap();
        let (slo, shi) = if s1 < s2 { (s1, s2) } else { (s2, s1) };
        let (llo, lhi) = if l1 < l2 { (l1, l2) } else { (l2, l1) };
        prop_assert!(tube_radius(&at(llo), slo) <= tube_radius(&at(llo), shi));
        prop_assert!(tube_radius(&at(lhi), slo) <= tube_radius(&at(llo), slo));
    }

    #[test]
    fn min_norm_is_feasible_and_minimal(a in prop::collection::vec(-3.0f64..3.0, 1..5), b in -3.0f64..3.0, seed in 0u64..1000) {
        let a = Vector::from_vec(a);
        prop_assume!(a.norm() > 1e-3);
        let c = FeedbackConstraint { a: a.clone(), b, energy: 1.0 };
        let k = solve_min_norm(&c).unwrap();
        prop_assert!(c.slack(&k) >= -1e-9 * (1.0 + b.abs()));
        let mut rng = stream(seed, "feasible", 0);
        for _ in 0..20 {
            let v = Vector::from_fn(a.len(), |_, _| rand::Rng::random_range(&mut rng, -5.0..5.0));
            if c.slack(&v) >= 0.0 {
                prop_assert!(k.norm() <= v.norm() + 1e-12);
            }
        }
    }

    #[test]
    fn metric_ball_samples_are_inside(m in spd(4), r in 0.1f64..3.0, seed in 0u64..1000) {
        let c = Vector::from_vec(vec![1.0, -2.0, 0.5, 0.0]);
        let mut rng = stream(seed, "ball", 0);
        for _ in 0..50 {
            let x = sample_metric_ball(&m, &c, r, &mut rng);
            let e = &x - &c;
            prop_assert!(e.dot(&(&m * &e)) <= r * r * (1.0 + 1e-9));
        }
    }

    #[test]
    fn projections_never_exclude_interior_points(m in spd(5), r in 0.1f64..2.0, seed in 0u64..1000) {
        let c = Vector::zeros(5);
        let e = Ellipse2d::from_metric(&m, &c, 1, 3, r).unwrap();
        let mut rng = stream(seed, "projection", 0);
        for _ in 0..200 {
            let x = sample_metric_ball(&m, &c, r, &mut rng);
            prop_assert!(e.level([x[1], x[3]]) <= r * r * (1.0 + 1e-9));
        }
    }

    #[test]
    fn tightened_box_is_inside_the_original(m in spd(3), r in 0.0f64..2.0, w in prop::collection::vec(0.5f64..5.0, 3)) {
        let metric = ContractionMetric::constant(m, 1.0).unwrap();
        let b = BoxSet::symmetric(&w);
        let t = tighten_state_box(&b, r, &metric);
        for i in 0..3 {
            prop_assert!(t.set.lo[i] >= b.lo[i] && t.set.hi[i] <= b.hi[i]);
        }
        if r == 0.0 {
            prop_assert_eq!(&t.set, &b);
        }
    }

    #[test]
    fn constant_distance_is_a_metric(m in spd(3), p in prop::collection::vec(-3.0f64..3.0, 9)) {
        let metric = ContractionMetric::constant(m, 1.0).unwrap();
        let v = |k: usize| Vector::from_vec(p[3 * k..3 * k + 3].to_vec());
        let d = |a: &Vector, b: &Vector| riemannian_distance(&metric, a, b, &Default::default()).0;
        let (x, y, z) = (v(0), v(1), v(2));
        prop_assert!((d(&x, &y) - d(&y, &x)).abs() < 1e-12);
        prop_assert!(d(&x, &z) <= d(&x, &y) + d(&y, &z) + 1e-9);
        prop_assert_eq!(d(&x, &x), 0.0);
    }
}
