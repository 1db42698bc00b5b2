use std::f64::consts::PI;

use proptest::prelude::*;

use r2n2_core::autodiff::{spatial_softmax, Tensor};
use r2n2_core::baseline::{count_transform_params, Transform};
use r2n2_core::data::{generate_case, DEFAULT_BLOBS};
use r2n2_core::deform::{
    covariance, gaussian_local_field, render_sequence, sequence_param_count, BSplineModel, LocalDeformParams,
};
use r2n2_core::eval::{tre, EvalReport};
use r2n2_core::geometry::{make_grid, warp, DisplacementField, Image2D};
use r2n2_core::net::{fuse_positions, position_certainty, squash_params};
use r2n2_core::objectives::{tv_loss, TV_EPSILON};
use r2n2_core::optim::{clip_global_norm, global_norm};

fn params() -> impl Strategy<Value = LocalDeformParams> {
    (
        -1.0..1.0f64,
        -1.0..1.0f64,
        1e-3..0.3f64,
        1e-3..0.3f64,
        0.0..PI,
        -1.0..1.0f64,
        -1.0..1.0f64,
    )
        .prop_map(|(x, y, sx, sy, a, vx, vy)| LocalDeformParams {
            center: (x, y),
            sigma_x: sx,
            sigma_y: sy,
            alpha: a,
            weight: (vx, vy),
        })
}

fn prob_map(values: Vec<f64>) -> Tensor {
    spatial_softmax(&Tensor::new(&[1, 4, 4], values))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn covariance_is_symmetric_with_the_shape_sizes_as_eigenvalues(
        sx in 1e-4..1.0f64, sy in 1e-4..1.0f64, a in -4.0..4.0f64
    ) {
        let c = covariance(sx, sy, a).unwrap();
        prop_assert_eq!(c[0][1], c[1][0]);
        let tr = c[0][0] + c[1][1];
        let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
        prop_assert!((tr - (sx + sy)).abs() <= 1e-9);
        prop_assert!((det - sx * sy).abs() <= 1e-9);
    }

    #[test]
    fn isotropic_bumps_ignore_rotation(s in 1e-3..0.3f64, a in 0.0..PI, b in 0.0..PI) {
        let ca = covariance(s, s, a).unwrap();
        let cb = covariance(s, s, b).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                prop_assert!((ca[i][j] - cb[i][j]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn local_field_peaks_at_the_weight(p in params()) {
        let grid = make_grid(17, 17).unwrap();
        let mut p = p;
        // put the centre on a pixel
        p.center = (grid.from_col(5.0), grid.from_row(11.0));
        let f = gaussian_local_field(&p, &grid).unwrap();
        prop_assert_eq!(f.u()[[11, 5]], p.weight.0);
        prop_assert_eq!(f.v()[[11, 5]], p.weight.1);
        let (vx, vy) = p.weight;
        let bound = vx.abs().max(vy.abs());
        prop_assert!(f.u().iter().chain(f.v().iter()).all(|x| x.abs() <= bound + 1e-15));
    }

    #[test]
    fn sequence_rendering_is_additive(a in prop::collection::vec(params(), 0..4), b in prop::collection::vec(params(), 0..4)) {
        let grid = make_grid(9, 11).unwrap();
        let joined: Vec<_> = a.iter().chain(&b).cloned().collect();
        let fa = render_sequence(&a, &grid).unwrap();
        let fb = render_sequence(&b, &grid).unwrap();
        let fj = render_sequence(&joined, &grid).unwrap();
        for ((x, y), z) in fa.u().iter().zip(fb.u()).zip(fj.u()) {
            prop_assert!((x + y - z).abs() <= 1e-12);
        }
    }

    #[test]
    fn sequence_counts_seven_per_step(p in params(), t in 1usize..60) {
        let seq = vec![p; t];
        prop_assert_eq!(sequence_param_count(t), 7 * t);
        prop_assert_eq!(count_transform_params(Transform::Sequence(&seq)), 7 * t);
    }

    #[test]
    fn bspline_model_counts_two_per_control_point(n in 16usize..80, k in 3usize..21) {
        let grid = make_grid(n, n).unwrap();
        let m = BSplineModel::new(&grid, k).unwrap();
        let (r, c) = m.control_shape();
        prop_assert_eq!(m.param_count(), 2 * r * c);
        prop_assert_eq!(count_transform_params(Transform::BSpline(&m)), 2 * r * c);
    }

    #[test]
    fn spatial_softmax_normalizes_and_ignores_shifts(v in prop::collection::vec(-20.0..20.0f64, 16), k in -50.0..50.0f64) {
        let p = prob_map(v.clone());
        prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        let q = prob_map(v.iter().map(|x| x + k).collect());
        for (a, b) in p.data().iter().zip(q.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn certainty_stays_in_range(a in prop::collection::vec(-5.0..5.0f64, 16), b in prop::collection::vec(-5.0..5.0f64, 16)) {
        let w = position_certainty(&prob_map(a), &prob_map(b)).unwrap();
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&w));
    }

    #[test]
    fn fused_position_is_a_convex_combination(t in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64, 0.0..2.0f64), 1..4)) {
        let (x, y) = fuse_positions(&t);
        let lo = t.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let hi = t.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
        let lo = t.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let hi = t.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(y >= lo - 1e-12 && y <= hi + 1e-12);
    }

    #[test]
    fn squashed_parameters_stay_in_range(raw in prop::array::uniform5(-50.0..50.0f64), x in -1.0..1.0f64, y in -1.0..1.0f64) {
        let p = squash_params(raw, (x, y), 0.3);
        prop_assert!(p.sigma_x > 0.0 && p.sigma_x <= 0.3);
        prop_assert!(p.sigma_y > 0.0 && p.sigma_y <= 0.3);
        prop_assert!((0.0..=PI).contains(&p.alpha));
        prop_assert!(p.weight.0.abs() <= 1.0 && p.weight.1.abs() <= 1.0);
        prop_assert_eq!(p.center, (x, y));
    }

    #[test]
    fn warp_by_zero_is_identity_and_linear_in_the_image(
        a in prop::collection::vec(0.0..1.0f64, 64),
        b in prop::collection::vec(0.0..1.0f64, 64),
        du in -0.3..0.3f64, dv in -0.3..0.3f64, k in -2.0..2.0f64
    ) {
        let grid = make_grid(8, 8).unwrap();
        let ia = Image2D::new(grid.clone(), ndarray::Array2::from_shape_vec((8, 8), a).unwrap()).unwrap();
        let ib = Image2D::new(grid.clone(), ndarray::Array2::from_shape_vec((8, 8), b).unwrap()).unwrap();
        prop_assert_eq!(warp(&ia, &DisplacementField::zeros(&grid)).unwrap(), ia.clone());
        let f = DisplacementField::constant(&grid, du, dv);
        let lhs = warp(&ia.combine(1.0, &ib, k).unwrap(), &f).unwrap();
        let rhs = warp(&ia, &f).unwrap().combine(1.0, &warp(&ib, &f).unwrap(), k).unwrap();
        for (x, y) in lhs.values().iter().zip(rhs.values()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn tv_of_a_constant_field_is_the_floor(du in -1.0..1.0f64, dv in -1.0..1.0f64) {
        let grid = make_grid(7, 9).unwrap();
        let tv = tv_loss(&DisplacementField::constant(&grid, du, dv));
        prop_assert!((tv - TV_EPSILON.sqrt()).abs() <= 1e-15);
    }

    #[test]
    fn tre_is_nonnegative_and_exact_for_constant_shifts(
        pts in prop::collection::vec((-0.9..0.9f64, -0.9..0.9f64), 1..10),
        dx in -0.05..0.05f64, dy in -0.05..0.05f64
    ) {
        let grid = make_grid(21, 21).unwrap();
        let moved: Vec<_> = pts.iter().map(|p| (p.0 + dx, p.1 + dy)).collect();
        let s = tre(&pts, &moved, &DisplacementField::constant(&grid, dx, dy)).unwrap();
        prop_assert!(s.mean >= 0.0 && s.mean <= 1e-12 && s.max <= 1e-12);
        let s = tre(&pts, &moved, &DisplacementField::zeros(&grid)).unwrap();
        prop_assert!((s.mean - dx.hypot(dy)).abs() <= 1e-12);
        prop_assert!(s.max >= s.mean - 1e-15 && s.rms >= s.mean - 1e-15);
    }

    #[test]
    fn gradient_clipping_bounds_the_norm(v in prop::collection::vec(-100.0..100.0f64, 1..20), max in 0.01..10.0f64) {
        let mut g = vec![Tensor::vector(v)];
        let before = global_norm(&g);
        let reported = clip_global_norm(&mut g, max);
        prop_assert_eq!(reported, before);
        prop_assert!(global_norm(&g) <= max.max(before.min(max)) * (1.0 + 1e-12));
    }

    #[test]
    fn report_json_round_trips(x in 0.0..10.0f64, y in 0.0..10.0f64, n in 1usize..500) {
        let text = format!(
            r#"{{"cases":[],"summary":{{"tre_before":{x},"tre_r2n2":{y},"tre_bspline":{y},"max_tre_r2n2":{x},
            "max_tre_bspline":{x},"reduction_r2n2":0.1,"reduction_bspline":0.2,"median_seconds_r2n2":{y},
            "median_seconds_bspline":{x},"speedup":1.5}},"param_counts":{{"sequence":{n},"bspline":{},"ratio":{}}},
            "steps":25,"headline":"mean","pixel_spacing_mm":null,"digests":{{"network":"a","baseline":"b","options":"c"}}}}"#,
            2 * n + 2,
            n as f64 / (2 * n + 2) as f64
        );
        let r = EvalReport::from_json(&text).unwrap();
        prop_assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn synthetic_cases_are_consistent(seed in any::<u64>()) {
        let c = generate_case(64, 0.08, DEFAULT_BLOBS, seed).unwrap();
        let grid = c.fixed.grid();
        prop_assert!(c.truth_field.max_magnitude() <= 0.08 + 1e-12);
        prop_assert!(tv_loss(&c.truth_field).is_finite());
        prop_assert_eq!(c.landmarks_fixed.len(), 20);
        let half = 0.5 * grid.spacing_x();
        for (&(x, y), &(mx, my)) in c.landmarks_fixed.iter().zip(&c.landmarks_moving) {
            prop_assert!((-1.0..=1.0).contains(&x) && (-1.0..=1.0).contains(&y));
            // the truth field carries each fixed landmark onto its partner
            let (u, v) = c.truth_field.sample(x, y);
            prop_assert!((x + u - mx).hypot(y + v - my) <= half);
        }
        // the moving image sampled through the truth reproduces the fixed one
        let back = warp(&c.moving, &c.truth_field).unwrap();
        let err = back.values().iter().zip(c.fixed.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 0.05, "{}", err);
    }
}
