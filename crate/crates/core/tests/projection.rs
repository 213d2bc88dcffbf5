use proptest::prelude::*;

use resectsim_core::geometry::{
    project_depth_to_cloud, transform_cloud, BoundingBox2D, BoxSource, Label, Point3, RigidTransform,
};
use resectsim_core::imageio::{decode_pgm, depth_to_pgm, encode_pgm, pgm_to_depth, DEPTH_UNIT_MM};
use resectsim_core::phantom::{generate_phantom, CameraModel, PhantomSpec, SceneState};
use resectsim_core::segmentation::mask_from_box;

/// World point on the ray through pixel (u, v) at optical depth `s`,
/// written out from the pinhole equations and the pose matrix.
fn ray_point(cam: &CameraModel, u: usize, v: usize, s: f64) -> Point3 {
    let k = cam.intrinsics;
    let c = [(u as f64 - k.cx) * s / k.fx, (v as f64 - k.cy) * s / k.fy, s];
    let r = cam.pose.rotation;
    let t = cam.pose.translation;
    Point3::new(
        r[0][0] * c[0] + r[0][1] * c[1] + r[0][2] * c[2] + t.x,
        r[1][0] * c[0] + r[1][1] * c[1] + r[1][2] * c[2] + t.y,
        r[2][0] * c[0] + r[2][1] * c[1] + r[2][2] * c[2] + t.z,
    )
}

/// Depth of the first crossing of the analytic trachea surface along the
/// pixel ray: fine march, then bisection.
fn analytic_depth(scene: &SceneState, cam: &CameraModel, u: usize, v: usize) -> Option<f64> {
    let tr = scene.trachea();
    let above = |s: f64| {
        let p = ray_point(cam, u, v, s);
        p.z - tr.height(p.x, p.y)
    };
    // The camera looks straight down, so optical depth is the height drop
    // from the eye; start just above the surface's height band.
    let (z_lo, z_hi) = tr.z_range();
    let eye_z = cam.pose.translation.z;
    let step = 0.05;
    let mut s = eye_z - z_hi - 1.0;
    let mut prev = above(s);
    while s < eye_z - z_lo + 1.0 {
        let next = above(s + step);
        if prev > 0.0 && next <= 0.0 {
            let (mut lo, mut hi) = (s, s + step);
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if above(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Some(0.5 * (lo + hi));
        }
        s += step;
        prev = next;
    }
    None
}

fn full_box(class: Label, w: usize, h: usize) -> BoundingBox2D {
    BoundingBox2D { class, u_min: 0.0, v_min: 0.0, u_max: w as f64, v_max: h as f64, cls_score: 1.0, source: BoxSource::Human }
}

/// Renders without noise, round-trips the depth through the 16-bit PGM
/// encoding, back-projects the trachea pixels and compares each point with
/// the analytic intersection of its pixel ray.
fn check_round_trip(scene: &SceneState, cam: &CameraModel) -> usize {
    let snap = scene.render_snapshot(cam).unwrap();
    let depth = pgm_to_depth(&decode_pgm(&encode_pgm(&depth_to_pgm(&snap.depth).unwrap())).unwrap()).unwrap();
    let mask = mask_from_box(&snap, &full_box(Label::Trachea, cam.width, cam.height)).unwrap();
    let cloud = project_depth_to_cloud(&depth, &mask, &snap.intrinsics).unwrap();
    let world = transform_cloud(&cloud, &snap.pose).unwrap();
    let k = cam.intrinsics;
    let mut n = 0;
    let mut i = 0;
    for v in 0..cam.height {
        for u in 0..cam.width {
            if !mask.get(u, v) || depth.get(u, v) <= 0.0 {
                continue;
            }
            let p = world.points()[i];
            i += 1;
            let s = analytic_depth(scene, cam, u, v).expect("trachea pixel ray hits the surface");
            let truth = ray_point(cam, u, v, s);
            // Length of the ray per unit of optical depth.
            let stretch = (1.0 + ((u as f64 - k.cx) / k.fx).powi(2) + ((v as f64 - k.cy) / k.fy).powi(2)).sqrt();
            let tol = DEPTH_UNIT_MM * stretch + 1e-6;
            assert!(
                p.distance(&truth) <= tol,
                "pixel ({u},{v}): {p:?} vs analytic {truth:?}, off by {}",
                p.distance(&truth)
            );
            n += 1;
        }
    }
    assert_eq!(i, world.len());
    n
}

#[test]
fn default_phantom_round_trip() {
    let scene = generate_phantom(&PhantomSpec::default()).unwrap();
    let mut cam = CameraModel::overhead(&scene);
    cam.depth_noise_sigma = 0.0;
    assert_eq!((cam.width, cam.height), (256, 256));
    let n = check_round_trip(&scene, &cam);
    assert!(n > 10_000, "only {n} trachea pixels");
}

#[test]
fn trachea_pixels_lie_within_a_voxel_of_the_surface() {
    let scene = generate_phantom(&PhantomSpec::default()).unwrap();
    let mut cam = CameraModel::overhead(&scene);
    cam.depth_noise_sigma = 0.0;
    let snap = scene.render_snapshot(&cam).unwrap();
    let mask = mask_from_box(&snap, &full_box(Label::Trachea, 256, 256)).unwrap();
    let cloud = transform_cloud(&project_depth_to_cloud(&snap.depth, &mask, &snap.intrinsics).unwrap(), &snap.pose).unwrap();
    let res = scene.spec().resolution;
    for p in cloud.points() {
        assert!((p.z - scene.trachea().height(p.x, p.y)).abs() <= res);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn round_trip_holds_across_phantoms_and_poses(
        seed in 1u64..1000,
        dx in -6.0f64..6.0,
        dy in -6.0f64..6.0,
        height in 180.0f64..320.0,
    ) {
        let scene = generate_phantom(&PhantomSpec::default().variant(seed)).unwrap();
        let mut cam = CameraModel::overhead(&scene);
        cam.depth_noise_sigma = 0.0;
        let station = scene.spec().tumor.station;
        cam.pose = RigidTransform::looking_down(Point3::new(dx, station + dy, height));
        prop_assert!(check_round_trip(&scene, &cam) > 1000);
    }
}
