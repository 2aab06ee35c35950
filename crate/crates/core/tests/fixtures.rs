//! Small worked scenes with answers known in closed form.

mod common;

use common::*;
use equiv3d::convhead::{train, HeadParams, TrainConfig};
use equiv3d::eval::{apply_head, evaluate_equivariance, EquivConfig};
use equiv3d::geometry::{
    backproject, gt_correspondences, pixel_center, raytrace_depth, Intrinsics, OcclusionTolerance, RigidPose,
    ViewRecord,
};
use equiv3d::synth::{generate, SceneKind, SynthConfig};
use nalgebra::Vector3;

fn view(kind: SceneKind, k: &Intrinsics, dir: Vector3<f64>, id: &str) -> ViewRecord {
    let pose = RigidPose::look_at(dir * 3.5, Vector3::zeros(), Vector3::z());
    ViewRecord {
        id: id.into(),
        intrinsics: k.clone(),
        depth: Some(raytrace_depth(&kind.scene(), k, &pose)),
        pose,
        features: None,
    }
}

/// Optical-axis depth of the closed-form first hit through every pixel.
fn analytic_depth(prims: &[equiv3d::geometry::Primitive], k: &Intrinsics, pose: &RigidPose) -> Vec<f64> {
    let mut out = Vec::new();
    for row in 0..k.height {
        for col in 0..k.width {
            let c = pixel_center(col, row);
            let (o, d) = pixel_ray(k, pose, c.x, c.y);
            // The ray direction has unit camera Z, so t is the depth.
            out.push(ray_scene(prims, &o, &d).unwrap_or(0.0));
        }
    }
    out
}

#[test]
fn sphere_depth_matches_closed_form() {
    let k = Intrinsics::from_fov(48, 40, 50.0).unwrap();
    let v = view(SceneKind::Sphere, &k, Vector3::new(0.3, -0.8, 0.5).normalize(), "a");
    let scene = SceneKind::Sphere.scene();
    let want = analytic_depth(&scene.primitives, &k, &v.pose);
    let got = &v.depth.as_ref().unwrap().values;
    let hits = want.iter().filter(|&&z| z > 0.0).count();
    assert!(hits > 100 && hits < want.len(), "{hits}");
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() <= 1e-9, "{g} vs {w}");
    }
}

#[test]
fn composite_depth_is_nearest_primitive() {
    let k = Intrinsics::from_fov(40, 40, 50.0).unwrap();
    let scene = SceneKind::BoxSphere.scene();
    for dir in [Vector3::new(1.0, 0.2, 0.3), Vector3::new(-0.4, 0.9, -0.6), Vector3::new(0.1, 0.1, 1.0)] {
        let v = view(SceneKind::BoxSphere, &k, dir.normalize(), "a");
        let got = &v.depth.as_ref().unwrap().values;
        let per: Vec<Vec<f64>> = scene
            .primitives
            .iter()
            .map(|p| analytic_depth(std::slice::from_ref(p), &k, &v.pose))
            .collect();
        for (i, g) in got.iter().enumerate() {
            let w = per.iter().map(|d| d[i]).filter(|&z| z > 0.0).fold(f64::INFINITY, f64::min);
            let w = if w.is_finite() { w } else { 0.0 };
            assert!((g - w).abs() <= 1e-9, "pixel {i}: {g} vs {w}");
        }
    }
}

#[test]
fn antipodal_sphere_views_share_only_the_silhouette() {
    let k = Intrinsics::from_fov(64, 64, 50.0).unwrap();
    let e = Vector3::new(0.2, 0.9, -0.3).normalize();
    let a = view(SceneKind::Sphere, &k, e, "a");
    let b = view(SceneKind::Sphere, &k, -e, "b");
    let occ = OcclusionTolerance::default();
    let gt = gt_correspondences(&a, &b, 1, &occ).unwrap();
    let valid = a.depth.as_ref().unwrap().valid_count();
    // Each camera sees the cap p.e > 1/3.5; the caps are disjoint, so only
    // grazing points within the depth tolerance can survive.
    assert!(gt.len() * 50 < valid, "{} of {valid}", gt.len());
    assert_eq!(gt.len() + gt.rejected, valid);
    let da = a.depth.as_ref().unwrap();
    for c in &gt.pairs {
        let z = da.sample_bilinear(&c.x1).unwrap();
        let p = backproject(&c.x1, z, &a.intrinsics, &a.pose).unwrap();
        assert!(p.normalize().dot(&e).abs() < 0.45, "{p}");
    }
}

fn finetune_fixture() -> (Vec<equiv3d::geometry::ObjectViews>, Vec<equiv3d::geometry::ObjectViews>, HeadParams) {
    let cfg = SynthConfig {
        scenes: vec![SceneKind::BoxSphere, SceneKind::Sphere],
        n_views: 8,
        noise: 0.4,
        seed: 3,
        ..SynthConfig::default()
    };
    let objects = generate(&cfg).unwrap();
    let init = HeadParams::zero_init(cfg.oracle().channels(), 1).unwrap();
    (objects[..1].to_vec(), objects[1..].to_vec(), init)
}

fn tuning(iterations: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        lr: 3e-4,
        tau: 0.01,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn short_finetuning_improves_held_out_ape() {
    let (train_set, held_out, init) = finetune_fixture();
    let eval_cfg = EquivConfig {
        gt_stride: 4,
        ..EquivConfig::default()
    };
    let score = |head: &HeadParams| {
        let mut views = held_out.clone();
        apply_head(&mut views, head).unwrap();
        evaluate_equivariance(&views, &eval_cfg).unwrap().ape_percent
    };
    let base = score(&init);
    let out = train(&train_set, &tuning(100, 1), init).unwrap();
    let tuned = score(&out.params);
    assert!(tuned < base, "{tuned} vs {base}");
}

#[test]
fn same_seed_gives_identical_loss_curves() {
    let (train_set, _, init) = finetune_fixture();
    let a = train(&train_set, &tuning(20, 7), init.clone()).unwrap();
    let b = train(&train_set, &tuning(20, 7), init.clone()).unwrap();
    assert_eq!(a.losses.len(), 20);
    assert_eq!(
        a.losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>(),
        b.losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(a.params.to_bytes(), b.params.to_bytes());
    let c = train(&train_set, &tuning(20, 8), init).unwrap();
    assert_ne!(a.losses, c.losses);
}
