//! Randomized invariants.

mod common;

use common::{brute_force_sorted, random_ball_cloud};
use pcal_core::datasets::{generate_shape, Family, ShapeSpec};
use pcal_core::geom::{estimate_normals, normalize_cloud, Neighborhood, PointCloud, Query, SpatialIndex};
use pcal_core::labels::{ClassId, LabelMap, Provenance};
use pcal_core::nnet::{forward, init_or_resize_head, smoothness_loss, Logits};
use pcal_core::oracle::evaluate;
use pcal_core::region::{grow_regions, GrowConfig, GrowMode};
use pcal_core::session::{Phase, Session, SessionConfig};
use proptest::prelude::*;

fn cloud_strategy(max: usize) -> impl Strategy<Value = PointCloud> {
    (1..max, any::<u64>()).prop_map(|(n, seed)| random_ball_cloud(n, seed))
}

/// Rotation about a unit axis by `angle` (Rodrigues).
fn rotation(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = axis.map(|v| v / norm);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

fn rotate(r: &[[f64; 3]; 3], p: &[f32; 3]) -> [f32; 3] {
    let v = p.map(f64::from);
    [0, 1, 2].map(|i| (r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2]) as f32)
}

fn close(a: &[f32; 3], b: &[f32; 3], tol: f32) -> bool {
    (0..3).all(|k| (a[k] - b[k]).abs() <= tol)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn knn_equals_brute_force(cloud in cloud_strategy(300), k in 1usize..40, probe in any::<u64>()) {
        let index = SpatialIndex::build(&cloud);
        let pts = cloud.positions();
        let k = k.min(pts.len());
        for q in (0..pts.len()).step_by(1 + pts.len() / 8) {
            let id = (q + probe as usize) % pts.len();
            let oracle: Vec<usize> = brute_force_sorted(pts, &pts[id], Some(id)).into_iter().take(k).map(|(_, i)| i).collect();
            prop_assert_eq!(index.query(Query::Id(id), Neighborhood::Knn { k }).unwrap(), oracle);
            let free: Vec<usize> = brute_force_sorted(pts, &pts[id], None).into_iter().take(k).map(|(_, i)| i).collect();
            prop_assert_eq!(index.query(Query::Point(pts[id]), Neighborhood::Knn { k }).unwrap(), free);
        }
    }

    #[test]
    fn fdn_is_exact_and_nested(cloud in cloud_strategy(300), r1 in 0.0f32..1.0, extra in 0.0f32..1.0) {
        let index = SpatialIndex::build(&cloud);
        let pts = cloud.positions();
        let r2 = r1 + extra;
        for id in (0..pts.len()).step_by(1 + pts.len() / 6) {
            let small = index.neighbors_of(id, Neighborhood::Fdn { radius: r1 }).unwrap();
            let large = index.neighbors_of(id, Neighborhood::Fdn { radius: r2 }).unwrap();
            prop_assert!(small.iter().all(|i| large.contains(i)));
            let oracle: Vec<usize> = brute_force_sorted(pts, &pts[id], Some(id))
                .into_iter()
                .filter(|&(d2, _)| d2 <= (r1 as f64) * (r1 as f64))
                .map(|(_, i)| i)
                .collect();
            let mut got = small.clone();
            got.sort_unstable();
            let mut want = oracle;
            want.sort_unstable();
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn normalize_is_idempotent_and_rotation_equivariant(
        cloud in cloud_strategy(200),
        axis in prop::array::uniform3(-1.0f64..1.0),
        angle in 0.0f64..std::f64::consts::TAU,
    ) {
        prop_assume!(axis.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let once = normalize_cloud(&cloud);
        let twice = normalize_cloud(&once);
        for (a, b) in once.positions().iter().zip(twice.positions()) {
            prop_assert!(close(a, b, 1e-5), "{:?} vs {:?}", a, b);
        }
        let r = rotation(axis, angle);
        let rotated = PointCloud::new("r", cloud.positions().iter().map(|p| rotate(&r, p)).collect()).unwrap();
        let lhs = normalize_cloud(&rotated);
        for (a, p) in lhs.positions().iter().zip(once.positions()) {
            prop_assert!(close(a, &rotate(&r, p), 1e-5), "{:?} vs {:?}", a, rotate(&r, p));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_smoothness_is_nonnegative(
        rows in prop::collection::vec(prop::collection::vec(-20.0f64..20.0, 3), 2..24),
        seed in any::<u64>(),
    ) {
        let n = rows.len();
        let logits = Logits::new(ndarray::Array2::from_shape_fn((n, 3), |(i, k)| rows[i][k]));
        for row in logits.softmax().rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-5);
        }
        let cloud = random_ball_cloud(n, seed);
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
        prop_assert!(smoothness_loss(&logits, &cloud, 0.3, &pairs).unwrap() >= 0.0);
        let selfs: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
        prop_assert_eq!(smoothness_loss(&logits, &cloud, 0.3, &selfs).unwrap(), 0.0);
    }

    #[test]
    fn pair_term_decays_with_distance(
        a in prop::array::uniform3(-5.0f64..5.0),
        b in prop::array::uniform3(-5.0f64..5.0),
        d1 in 0.01f32..2.0,
        gap in 0.01f32..2.0,
    ) {
        let logits = Logits::new(ndarray::Array2::from_shape_fn((2, 3), |(i, k)| if i == 0 { a[k] } else { b[k] }));
        let kl_zero = smoothness_loss(&logits, &PointCloud::new("p", vec![[0.0; 3], [0.0; 3]]).unwrap(), 1.0, &[(0, 1)]).unwrap();
        prop_assume!(kl_zero > 1e-9);
        let at = |d: f32| {
            let cloud = PointCloud::new("p", vec![[0.0; 3], [d, 0.0, 0.0]]).unwrap();
            smoothness_loss(&logits, &cloud, 1.0, &[(0, 1)]).unwrap()
        };
        prop_assert!(at(d1) > at(d1 + gap));
    }

    #[test]
    fn head_resize_keeps_the_trunk(c0 in 2usize..8, c1 in 2usize..8, seed in any::<u64>()) {
        let base = init_or_resize_head(None, c0, seed).unwrap();
        let resized = init_or_resize_head(Some(&base), c1, seed ^ 1).unwrap();
        prop_assert_eq!(resized.num_classes(), c1);
        let (old, new) = (base.to_bytes(), resized.to_bytes());
        let head = |p: &pcal_core::nnet::ModelParams| p.head.w.len() + p.head.b.len();
        let trunk = old.len() - 4 * head(&base);
        prop_assert_eq!(&old[..trunk], &new[..new.len() - 4 * head(&resized)]);
    }

    #[test]
    fn evaluate_is_symmetric_and_bounded(
        pairs in prop::collection::vec((0u16..4, 0u16..4), 1..200),
    ) {
        let a: Vec<ClassId> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<ClassId> = pairs.iter().map(|p| p.1).collect();
        let la = LabelMap::from_classes(&a, 4, Provenance::Seed).unwrap();
        let lb = LabelMap::from_classes(&b, 4, Provenance::Seed).unwrap();
        let (acc, miou) = evaluate(&la, &lb).unwrap();
        let (acc_rev, _) = evaluate(&lb, &la).unwrap();
        prop_assert_eq!(acc, acc_rev);
        prop_assert!((0.0..=1.0).contains(&acc) && (0.0..=1.0).contains(&miou));
    }

    #[test]
    fn label_file_roundtrip(entries in prop::collection::vec(prop::option::of(0u16..5), 1..300)) {
        let labels = LabelMap::from_optional(&entries, 5, Provenance::Seed).unwrap();
        prop_assert_eq!(LabelMap::from_label_file(&labels.to_label_file(), Provenance::Seed).unwrap(), labels);
    }
}

/// Seeds one random point per class on a normal-estimated chair.
fn chair_with_seeds(seed: u64, n: usize) -> (PointCloud, LabelMap, SpatialIndex) {
    let mut spec = ShapeSpec::new(Family::Chair, 3, seed);
    spec.points_n = n;
    let (cloud, truth) = generate_shape(&spec).unwrap();
    let cloud = estimate_normals(&cloud, 16).unwrap();
    let mut seeds = LabelMap::unlabeled(n, 3).unwrap();
    for c in 0..3u16 {
        let members: Vec<usize> = (0..n).filter(|&i| truth.class(i) == Some(c)).collect();
        seeds.set(members[(seed as usize * 31 + 7) % members.len()], c, Provenance::Seed).unwrap();
    }
    let index = SpatialIndex::build(&cloud);
    (cloud, seeds, index)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn growth_is_monotone_deterministic_and_capped(seed in 0u64..1000, k in 4usize..16, fraction in 0.01f64..1.0) {
        let (cloud, seeds, index) = chair_with_seeds(seed, 256);
        let config = GrowConfig {
            mode: GrowMode::NormalAngle,
            connectivity: Neighborhood::Knn { k },
            angle_threshold: 20.0,
            max_region_fraction: fraction,
            ..GrowConfig::default()
        };
        let out = grow_regions(&cloud, &seeds, &config, &index).unwrap();
        prop_assert_eq!(&out, &grow_regions(&cloud, &seeds, &config, &index).unwrap());
        for i in 0..cloud.len() {
            if let Some(l) = seeds.get(i) {
                prop_assert_eq!(out.get(i), Some(l));
            }
        }
        // one seed per class, so grown points per class are grown points per seed
        let cap = config.region_cap(cloud.len());
        for c in 0..3u16 {
            let grown = (0..cloud.len())
                .filter(|&i| out.get(i).is_some_and(|l| l.class == c && l.provenance == Provenance::Grown))
                .count();
            prop_assert!(grown <= cap, "class {} grew {} > cap {}", c, grown, cap);
        }
    }

    #[test]
    fn wider_angle_grows_a_superset(seed in 0u64..1000, t1 in 1.0f64..60.0, extra in 0.0f64..60.0) {
        let (cloud, seeds, index) = chair_with_seeds(seed, 256);
        let at = |theta: f64| {
            let config = GrowConfig {
                mode: GrowMode::NormalAngle,
                connectivity: Neighborhood::Knn { k: 8 },
                angle_threshold: theta,
                max_region_fraction: 1.0,
                ..GrowConfig::default()
            };
            grow_regions(&cloud, &seeds, &config, &index).unwrap()
        };
        let (small, large) = (at(t1), at(t1 + extra));
        for i in 0..cloud.len() {
            prop_assert!(small.get(i).is_none() || large.get(i).is_some());
        }
    }

    #[test]
    fn forward_commutes_with_point_permutation(n in 2usize..40, seed in any::<u64>(), shift in 1usize..40) {
        let cloud = random_ball_cloud(n, seed);
        let perm: Vec<usize> = (0..n).map(|i| (i * (2 * shift + 1) + shift) % n).collect();
        prop_assume!({
            let mut s = perm.clone();
            s.sort_unstable();
            s.dedup();
            s.len() == n
        });
        let permuted = cloud.select(&perm).unwrap();
        let params = init_or_resize_head(None, 3, seed).unwrap();
        let (a, _) = forward(&params, &cloud).unwrap();
        let (b, _) = forward(&params, &permuted).unwrap();
        for (row, &src) in perm.iter().enumerate() {
            for k in 0..3 {
                prop_assert!((b.values[[row, k]] - a.values[[src, k]]).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn generated_shapes_are_full_contiguous_and_normalized(
        family in prop::sample::select(vec![Family::Chair, Family::Table, Family::Lamp, Family::TwoClassPlant]),
        three in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let parts = if three && family != Family::TwoClassPlant { 3 } else { 2 };
        let mut spec = ShapeSpec::new(family, parts, seed);
        spec.points_n = 200;
        let (cloud, labels) = generate_shape(&spec).unwrap();
        prop_assert!(labels.is_full());
        prop_assert!(labels.histogram().iter().all(|&h| h > 0));
        let again = normalize_cloud(&cloud);
        for (a, b) in cloud.positions().iter().zip(again.positions()) {
            prop_assert!(close(a, b, 1e-5));
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Seeds(Vec<(usize, u16)>),
    Corrections(Vec<(usize, u16)>, bool),
    Train,
    Finalize,
}

fn op_strategy(n: usize) -> impl Strategy<Value = Op> {
    let items = prop::collection::vec((0..n + 2, 0u16..4), 0..6);
    prop_oneof![
        items.clone().prop_map(Op::Seeds),
        (items, any::<bool>()).prop_map(|(v, e)| Op::Corrections(v, e)),
        Just(Op::Train),
        Just(Op::Finalize),
    ]
}

fn quick_session(n: usize) -> Session {
    let mut config = SessionConfig::default();
    config.train.epochs_per_round = 1;
    config.grow = GrowConfig { mode: GrowMode::KnnBall, connectivity: Neighborhood::Knn { k: 3 }, ..GrowConfig::default() };
    Session::create("p", random_ball_cloud(n, 5), 3, None, config).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn clicks_count_accepted_gestures_only(valid_start in any::<bool>(), ops in prop::collection::vec(op_strategy(24), 1..12)) {
        let mut session = quick_session(24);
        let mut expected = 0;
        // random seed sets rarely cover every class, so often start from a valid one
        let start = valid_start.then(|| Op::Seeds(vec![(0, 0), (1, 1), (2, 2)]));
        for op in start.into_iter().chain(ops) {
            let before = session.clone();
            let result = match &op {
                Op::Seeds(s) => session.submit_seeds(s).map(|_| s.len()),
                Op::Corrections(c, e) => session.submit_corrections(c, *e).map(|_| c.len()),
                Op::Train => session.train_and_predict().map(|_| 0),
                Op::Finalize => session.finalize().map(|_| 0),
            };
            match result {
                Ok(clicks) => expected += clicks,
                Err(_) => {
                    prop_assert_eq!(session.clicks(), before.clicks());
                    prop_assert_eq!(session.labels(), before.labels());
                    prop_assert_eq!(session.phase(), before.phase());
                    prop_assert_eq!(session.events().len(), before.events().len());
                }
            }
            prop_assert_eq!(session.clicks().len(), expected);
            // human labels outrank everything the model writes
            for click in session.clicks().entries() {
                let label = session.labels().get(click.point_id).unwrap();
                prop_assert!(label.provenance == Provenance::Seed || label.provenance == Provenance::Corrected);
            }
        }
        if session.phase() == Phase::Finalized {
            prop_assert!(session.labels().is_full());
        }
    }
}
