use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use resectsim_core::geometry::Point3;
use resectsim_core::phantom::{generate_phantom, CutTool, PhantomSpec, SceneState, TumorSpec};
use resectsim_core::planner::{TravelDirection, Waypoint};

fn wp(p: Point3) -> Waypoint {
    Waypoint { position: p, pitch_deg: 28.3, direction: TravelDirection::PlusX, t_s: 0.0 }
}

/// Short random path over the tumor whose every waypoint sits `lift` or
/// more above the analytic surface.
fn random_path(scene: &SceneState, rng: &mut ChaCha8Rng, lift: f64) -> Vec<Waypoint> {
    let tr = scene.trachea();
    let (y0, y1) = scene.tumor_y_extent();
    let hw = tr.half_width() - 0.5;
    let n = rng.random_range(2..6);
    (0..n)
        .map(|_| {
            let x = rng.random_range(-hw.min(14.0)..hw.min(14.0));
            let y = rng.random_range(y0 - 2.0..y1 + 2.0);
            let z = tr.height(x, y) + lift + rng.random_range(0.0..12.0);
            wp(Point3::new(x, y, z))
        })
        .collect()
}

#[test]
fn paths_on_or_above_the_surface_never_perforate() {
    let base = generate_phantom(&PhantomSpec::default()).unwrap();
    let tool = CutTool { kerf: 1.0, edge_length: 4.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut scene = base.clone();
    for plan in 0..1000 {
        if plan % 50 == 0 {
            scene = base.clone();
        }
        // Half the plans graze the surface exactly.
        let lift = if plan % 2 == 0 { 0.0 } else { 0.5 };
        let mut path = random_path(&scene, &mut rng, lift);
        if lift == 0.0 {
            let p = path[0].position;
            path[0].position.z = scene.trachea().height(p.x, p.y);
        }
        assert!(path.iter().all(|w| w.position.z >= scene.trachea().height(w.position.x, w.position.y)));
        let out = scene.apply_cut(&path, &tool).unwrap();
        assert!(!out.perforated, "plan {plan} perforated: {path:?}");
    }
}

#[test]
fn dipping_below_the_surface_perforates() {
    let mut scene = generate_phantom(&PhantomSpec::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut path = random_path(&scene, &mut rng, 1.0);
    let p = path[1].position;
    path[1].position.z = scene.trachea().height(p.x, p.y) - 1.0;
    assert!(scene.apply_cut(&path, &CutTool::default()).unwrap().perforated);
}

#[test]
fn volume_is_conserved_across_cuts() {
    let mut scene = generate_phantom(&PhantomSpec::default().variant(4)).unwrap();
    let initial = scene.initial_volume();
    let voxel = scene.tumor().voxel_volume();
    let tool = CutTool { kerf: 1.0, edge_length: 3.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for cut in 1..=40 {
        let path = random_path(&scene, &mut rng, 0.5);
        let out = scene.apply_cut(&path, &tool).unwrap();
        assert!(!out.perforated);
        let total = scene.removed_volume() + scene.tumor_volume();
        assert!((total - initial).abs() <= cut as f64 * voxel, "cut {cut}: {total} vs {initial}");
        if scene.detached() {
            break;
        }
    }
}

#[test]
fn six_retractions_cover_the_extent() {
    let mut scene = generate_phantom(&PhantomSpec::default()).unwrap();
    let (y0, y1) = scene.tumor_y_extent();
    let l = y1 - y0;
    let start = scene.peel_station();
    let volume = scene.tumor_volume();
    for _ in 0..6 {
        scene.retract_tumor(l / 6.0).unwrap();
    }
    assert!((scene.peel_station() - start - l).abs() <= 1e-9);
    assert_eq!(scene.tumor_volume(), volume);
    assert!(scene.retract_tumor(0.0).is_err());
}

#[test]
fn half_ellipsoid_volume_oracle() {
    // Ellipsoidal dome: footprint diameter 20, height 10.
    let spec = PhantomSpec {
        tumor: TumorSpec { diameter: 20.0, height: 10.0, exp_n: 2.0, exp_e: 2.0, ..PhantomSpec::default().tumor },
        ..PhantomSpec::default()
    };
    let scene = generate_phantom(&spec).unwrap();
    let analytic = 2.0 / 3.0 * std::f64::consts::PI * 10.0 * 10.0 * 10.0;
    let rel = (scene.tumor_volume() - analytic).abs() / analytic;
    assert!(rel <= 0.02, "volume {} vs {analytic}", scene.tumor_volume());
    assert_eq!(scene.initial_volume(), scene.tumor_volume());
}

#[test]
fn tumor_voxels_sit_above_the_surface_for_every_variant() {
    for seed in 1..=5 {
        let scene = generate_phantom(&PhantomSpec::default().variant(seed)).unwrap();
        let g = scene.tumor();
        let half = g.resolution() / 2.0;
        for idx in g.occupied_indices() {
            let c = g.center_of(idx);
            assert!(c.z + half >= scene.trachea().height(c.x, c.y), "seed {seed} voxel {c:?}");
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Retract(f64),
    Cut(u64),
    Render,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0.01f64..8.0).prop_map(Op::Retract),
        any::<u64>().prop_map(Op::Cut),
        Just(Op::Render),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn peel_station_never_decreases(ops in proptest::collection::vec(op(), 1..12)) {
        let mut scene = generate_phantom(&PhantomSpec::default()).unwrap();
        let mut peel = scene.peel_station();
        let mut removed = scene.removed_volume();
        for o in ops {
            match o {
                Op::Retract(d) => scene.retract_tumor(d).unwrap(),
                Op::Cut(seed) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let path = random_path(&scene, &mut rng, 0.2);
                    scene.apply_cut(&path, &CutTool::default()).unwrap();
                }
                Op::Render => {
                    let cam = resectsim_core::phantom::CameraModel::overhead(&scene);
                    let _ = scene.render_snapshot(&cam);
                }
            }
            prop_assert!(scene.peel_station() >= peel);
            prop_assert!(scene.removed_volume() >= removed);
            peel = scene.peel_station();
            removed = scene.removed_volume();
        }
    }

    #[test]
    fn generation_is_deterministic(seed in 0u64..10_000) {
        let spec = PhantomSpec::default().variant(seed);
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        prop_assert!(a.tumor() == b.tumor());
        prop_assert_eq!(a.initial_volume(), b.initial_volume());
        prop_assert_eq!(a.trachea().height(3.0, 30.0), b.trachea().height(3.0, 30.0));
    }
}
