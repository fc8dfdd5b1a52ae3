use nalgebra::{Point3, Vector3};
use proptest::prelude::*;

use scene_analogy::coarse::AffineMap;
use scene_analogy::config::PipelineConfig;
use scene_analogy::eval::evaluate_map;
use scene_analogy::pipeline::{build_scene_map, Provenance, SceneMap};
use scene_analogy::scene::{validate_scene, ObjectInstance, SceneBundle};
use scene_analogy::testkit::{gen_pair, gen_scene, whole_scene_group, SynthSpec, Transform};
use scene_analogy::tps::ThinPlateSpline;
use scene_analogy::transfer::{astar, build_occupancy_from_points, sample_waypoints, transfer_long, transfer_short, OccupancyGrid, Trajectory};

fn fast_cfg() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.optim.sample_spacing = 0.15;
    cfg
}

fn affine_map(affine: AffineMap) -> SceneMap {
    let scene = flat_patch();
    let mut map = build_scene_map(&scene, &scene, &fast_cfg()).unwrap();
    map.spline = ThinPlateSpline::from_affine(&affine);
    map.provenance = Provenance {
        fallback: None,
        ..map.provenance
    };
    map
}

/// One object: a 5 × 5 lattice in the z = 0 plane.
fn flat_patch() -> SceneBundle {
    let points: Vec<Point3<f64>> = (0..25).map(|i| Point3::new((i % 5) as f64 * 0.1, (i / 5) as f64 * 0.1, 0.0)).collect();
    SceneBundle {
        scene_id: "patch".into(),
        feature_dim: 2,
        embedding_dim: 2,
        objects: vec![ObjectInstance {
            object_id: "patch".into(),
            label: None,
            centroid: ObjectInstance::mean_point(&points),
            point_features: points.iter().map(|p| vec![p.x, p.y]).collect(),
            points,
            embedding: vec![1.0, 0.0],
        }],
    }
}

#[test]
fn offset_flat_reference_scores_zero_zero_one() {
    let patch = flat_patch();
    let map = affine_map(AffineMap::translation(Vector3::new(0.0, 0.0, 0.22)));
    let report = evaluate_map(&map, &patch, &patch, &[0.15, 0.20, 0.25]).unwrap();
    assert_eq!(report.accuracies, vec![0.0, 0.0, 1.0]);
    assert!(report.distances.iter().all(|d| (d - 0.22).abs() < 1e-12));
}

#[test]
fn synthetic_scenes_pass_validation() {
    for seed in 0..5 {
        let scene = gen_scene(&SynthSpec::random_room(seed, 5)).unwrap();
        assert!(validate_scene(&scene).is_empty());
    }
}

#[test]
fn rigid_pair_end_to_end() {
    let spec = SynthSpec::random_room(11, 3);
    let rot = nalgebra::Rotation3::from_euler_angles(0.1, -0.2, 0.5);
    let truth = Transform::rigid(&rot, Vector3::new(1.0, -2.0, 0.3));
    let pair = gen_pair(&spec, &whole_scene_group(&spec, truth)).unwrap();
    let map = build_scene_map(&pair.target, &pair.reference, &fast_cfg()).unwrap();
    for p in pair.target.all_points().iter().step_by(3) {
        assert!((map.apply(p).unwrap() - pair.oracle.map(p)).norm() < 1e-6);
    }
    let report = evaluate_map(&map, &pair.target, &pair.reference, &[0.05]).unwrap();
    assert_eq!(report.accuracies, vec![1.0]);
}

#[test]
fn translation_map_on_empty_grid_translates_polyline() {
    let t = Vector3::new(0.5, 0.25, 0.0);
    let map = affine_map(AffineMap::translation(t));
    let corners = [Point3::new(-1.0, -1.0, -1.0), Point3::new(4.0, 4.0, 1.0)];
    let grid = OccupancyGrid::from_cells(corners[0], 0.1, [50, 50, 20], vec![false; 50 * 50 * 20]).unwrap();
    let pts = [Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.5, 0.0), Point3::new(2.0, 2.0, 0.2)];
    let traj = Trajectory::new("target", &pts);
    let moved = transfer_long(&traj, &map, &grid, 0.4, 0.5).unwrap();
    let short = transfer_short(&traj, &map).unwrap();
    assert_eq!(moved.points.first(), short.points.first());
    assert_eq!(moved.points.last(), short.points.last());
    // every planned point stays within a cell of the translated polyline
    let line: Vec<Point3<f64>> = pts.iter().map(|p| p + t).collect();
    for q in moved.positions() {
        let d = line
            .windows(2)
            .map(|w| {
                let ab = w[1] - w[0];
                let s = ((q - w[0]).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
                (q - (w[0] + ab * s)).norm()
            })
            .fold(f64::INFINITY, f64::min);
        assert!(d <= 0.1 * 3f64.sqrt() + 1e-9, "{q:?} is {d} from the polyline");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn long_transfer_concatenates_segments(
        raw in prop::collection::vec((0.0..3.0f64, 0.0..3.0f64, 0.0..1.0f64), 2..6),
        obstacles in prop::collection::vec((0.0..3.0f64, 0.0..3.0f64, 0.0..1.0f64), 0..30),
        stride in 0.3..1.5f64,
    ) {
        let map = affine_map(AffineMap::identity());
        let mut cloud: Vec<Point3<f64>> = obstacles.iter().map(|&(x, y, z)| Point3::new(x, y, z)).collect();
        cloud.push(Point3::new(-0.5, -0.5, -0.5));
        cloud.push(Point3::new(3.5, 3.5, 1.5));
        let grid = build_occupancy_from_points(&cloud, 0.2, 0.0, 0.0).unwrap();
        let pts: Vec<Point3<f64>> = raw.iter().map(|&(x, y, z)| Point3::new(x, y, z)).collect();
        let traj = Trajectory::new("target", &pts);

        let waypoints = sample_waypoints(&pts, stride).unwrap();
        let mut expected: Vec<Point3<f64>> = Vec::new();
        let mut failed = false;
        for w in waypoints.windows(2) {
            match astar(&grid, &w[0], &w[1], 0.5) {
                Ok(seg) => {
                    let skip = usize::from(expected.last() == Some(&seg.points[0]));
                    expected.extend(seg.points.into_iter().skip(skip));
                }
                Err(_) => {
                    failed = true;
                    break;
                }
            }
        }
        match transfer_long(&traj, &map, &grid, stride, 0.5) {
            Ok(out) => {
                prop_assert!(!failed);
                prop_assert_eq!(out.positions(), expected);
                prop_assert_eq!(out.segments.len(), waypoints.len() - 1);
            }
            Err(e) => {
                prop_assert!(failed);
                prop_assert_eq!(e.exit_code(), 4);
            }
        }
    }
}
