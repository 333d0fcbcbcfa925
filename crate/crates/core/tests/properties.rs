mod common;

use proptest::prelude::*;

use common::{brute_knn, brute_nearest};
use pc_advkit::attack::{project_bound, run_ita_with, AttackConfig, Objective};
use pc_advkit::defense::{sor, srs};
use pc_advkit::geometry::{cross, estimate_normals, knn, normalize_unit_ball, rotation_axis_angle, sub, PointCloud, Vec3};
use pc_advkit::metrics::{chamfer, hausdorff, l2_norm_distance, plane_distortion};
use pc_advkit::nn::{cross_entropy, Architecture, ClassifierModel};

fn coord() -> impl Strategy<Value = f64> {
    -1.0f64..1.0
}

fn points(lo: usize, hi: usize) -> impl Strategy<Value = Vec<Vec3>> {
    prop::collection::vec([coord(), coord(), coord()], lo..hi)
}

fn cloud(p: Vec<Vec3>) -> PointCloud {
    PointCloud::new(p).unwrap()
}

fn rotate(p: &[Vec3], r: &[[f64; 3]; 3]) -> Vec<Vec3> {
    p.iter()
        .map(|v| [0, 1, 2].map(|i| r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2]))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn metrics_ignore_point_order(a in points(3, 40), b in points(3, 40), seed in any::<u64>()) {
        let mut pa = a.clone();
        let mut pb = b.clone();
        let mut rng = common::rng(seed);
        use rand::seq::SliceRandom;
        pa.shuffle(&mut rng);
        pb.shuffle(&mut rng);
        let (ca, cb) = (cloud(a), cloud(b));
        let (sa, sb) = (cloud(pa), cloud(pb));
        prop_assert!((chamfer(&ca, &cb).unwrap() - chamfer(&sa, &sb).unwrap()).abs() < 1e-12);
        prop_assert_eq!(hausdorff(&ca, &cb).unwrap(), hausdorff(&sa, &sb).unwrap());
    }

    #[test]
    fn hausdorff_dominates_every_chamfer_term(a in points(1, 40), b in points(1, 40)) {
        let h = hausdorff(&cloud(a.clone()), &cloud(b.clone())).unwrap();
        for (_, d) in brute_nearest(&a, &b) {
            prop_assert!(h >= d);
        }
        prop_assert!(h >= chamfer(&cloud(a), &cloud(b)).unwrap());
    }

    #[test]
    fn metrics_invariant_under_common_rotation(
        a in points(30, 60),
        axis in [coord(), coord(), coord()],
        angle in -3.0f64..3.0,
        eps in prop::collection::vec(-0.05f64..0.05, 60),
    ) {
        prop_assume!(axis.iter().map(|c| c * c).sum::<f64>() > 1e-3);
        let adv: Vec<Vec3> = a.iter().zip(&eps).map(|(p, e)| [p[0] + e, p[1] - e, p[2] + 0.5 * e]).collect();
        let r = rotation_axis_angle(axis, angle);
        let (c0, a0) = (cloud(a.clone()), cloud(adv.clone()));
        let (c1, a1) = (cloud(rotate(&a, &r)), cloud(rotate(&adv, &r)));
        prop_assert!((l2_norm_distance(&a0, &c0).unwrap() - l2_norm_distance(&a1, &c1).unwrap()).abs() < 1e-9);
        prop_assert!((chamfer(&a0, &c0).unwrap() - chamfer(&a1, &c1).unwrap()).abs() < 1e-9);
        prop_assert!((hausdorff(&a0, &c0).unwrap() - hausdorff(&a1, &c1).unwrap()).abs() < 1e-9);
        prop_assert!((plane_distortion(&a0, &c0, 10).unwrap() - plane_distortion(&a1, &c1, 10).unwrap()).abs() < 1e-5);
    }

    #[test]
    fn normal_shift_of_a_plane(eps in 0.001f64..0.04, tilt in -1.0f64..1.0) {
        let grid: Vec<Vec3> = (0..100).map(|i| [(i % 10) as f64 * 0.1, (i / 10) as f64 * 0.1, 0.0]).collect();
        let r = rotation_axis_angle([1.0, 0.3, 0.0], tilt);
        let clean = cloud(rotate(&grid, &r));
        let n = [r[0][2], r[1][2], r[2][2]];
        let adv = cloud(clean.points.iter().map(|p| [p[0] + eps * n[0], p[1] + eps * n[1], p[2] + eps * n[2]]).collect());
        prop_assert!((plane_distortion(&adv, &clean, 8).unwrap() - eps * eps).abs() < 1e-6);
        prop_assert!((chamfer(&adv, &clean).unwrap() - eps * eps).abs() < 1e-6);
        // A tangential shift of the same size barely registers.
        let t = [r[0][0], r[1][0], r[2][0]];
        let slid = cloud(clean.points.iter().map(|p| [p[0] + eps * t[0], p[1] + eps * t[1], p[2] + eps * t[2]]).collect());
        prop_assert!(plane_distortion(&slid, &clean, 8).unwrap() < 1e-3 * chamfer(&slid, &clean).unwrap() + 1e-15);
    }

    #[test]
    fn knn_matches_brute_force(p in points(2, 80), k in 1usize..25) {
        prop_assert_eq!(knn(&cloud(p.clone()), k).neighbors, brute_knn(&p, k));
    }

    #[test]
    fn normalization_is_idempotent(p in points(2, 50), s in 0.1f64..10.0) {
        let scaled = cloud(p.iter().map(|v| v.map(|c| c * s + 0.3)).collect());
        let once = normalize_unit_ball(&scaled).unwrap();
        let twice = normalize_unit_ball(&once).unwrap();
        for (a, b) in once.points.iter().zip(&twice.points) {
            for i in 0..3 {
                prop_assert!((a[i] - b[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normals_are_unit(p in points(5, 60), k in 3usize..12) {
        let est = estimate_normals(&cloud(p), k).unwrap();
        for u in est.cloud.normals.unwrap() {
            prop_assert!(((u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_respects_bound(d in prop::collection::vec(-1.0f64..1.0, 1..50), b in 0.001f64..0.5) {
        let p = project_bound(&d, b);
        prop_assert!(p.iter().all(|x| x.abs() <= b));
        prop_assert_eq!(project_bound(&p, b), p.clone());
        for (x, y) in d.iter().zip(&p) {
            if x.abs() <= b {
                prop_assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn srs_keeps_a_sorted_subset(p in points(2, 60), keep in 0.05f64..1.0, seed in any::<u64>()) {
        let c = cloud(p);
        let out = srs(&c, keep, seed).unwrap();
        let expect = ((keep * c.len() as f64).round() as usize).clamp(1, c.len());
        prop_assert_eq!(out.len(), expect);
        let mut last = None;
        for q in &out.points {
            let i = c.points.iter().position(|x| x == q);
            prop_assert!(i.is_some());
            prop_assert!(last < i);
            last = i;
        }
    }

    #[test]
    fn sor_keeps_a_subset(p in points(4, 60), mult in 0.0f64..3.0) {
        let c = cloud(p);
        let out = sor(&c, 2, mult).unwrap();
        prop_assert!(!out.is_empty() && out.len() <= c.len());
        for q in &out.points {
            prop_assert!(c.points.contains(q));
        }
    }

    #[test]
    fn cross_entropy_is_consistent(logits in prop::collection::vec(-50.0f64..50.0, 2..8), t in 0usize..8) {
        let t = t % logits.len();
        let (loss, g) = cross_entropy(&logits, t);
        prop_assert!(loss >= 0.0 && loss.is_finite());
        prop_assert!(g.iter().sum::<f64>().abs() < 1e-9);
        prop_assert!(g[t] <= 0.0);
    }

    #[test]
    fn classifier_ignores_point_order(p in points(2, 30), seed in 0u64..50, mean in any::<bool>()) {
        let arch = if mean { Architecture::arch_b() } else { Architecture::arch_a() };
        let model = ClassifierModel::new(arch, 3, seed).unwrap();
        let mut q = p.clone();
        q.reverse();
        q.rotate_left(p.len() / 3);
        let (a, _) = model.forward(&cloud(p));
        let (b, _) = model.forward(&cloud(q));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn attack_output_is_bounded_and_along_normals(
        p in points(24, 40),
        bound in 0.005f64..0.2,
        target in 0usize..3,
        seed in any::<u64>(),
    ) {
        let clean = cloud(p);
        let model = ClassifierModel::new(Architecture::arch_a(), 3, seed % 7).unwrap();
        let cfg = AttackConfig { bound, iterations: 15, target_class: target, ..AttackConfig::default() };
        let res = run_ita_with(&model, &clean, &cfg, &Objective::Plain, seed).unwrap();
        prop_assert!(res.delta.as_ref().unwrap().iter().all(|d| d.abs() <= bound));
        let normals = estimate_normals(&clean, cfg.k_neighbors).unwrap().cloud.normals.unwrap();
        for ((a, c), u) in res.adversarial.points.iter().zip(&clean.points).zip(&normals) {
            let x = cross(sub(*a, *c), *u);
            prop_assert!((x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt() < 1e-12);
        }
        prop_assert_eq!(res.success, model.predict(&res.adversarial) == target);
        prop_assert!(res.iterations_used >= 1 && res.iterations_used <= 15);
    }
}
