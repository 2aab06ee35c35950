use std::ffi::{CStr, CString};
use std::ptr;

use equiv3d_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(eq3d_last_error()) }.to_string_lossy().into_owned()
}

fn make_map(channels: u32, patch: u32, w: u32, h: u32, data: &[f32]) -> *mut Eq3dFeatureMap {
    let mut m = ptr::null_mut();
    let s = unsafe { eq3d_feature_map_new(channels, patch, w, h, data.as_ptr(), data.len(), &mut m) };
    assert_eq!(s, Eq3dStatus::Ok, "{}", last_error());
    m
}

/// 4x3 image, patch 1, two channels: one-hot pattern so every pixel is unique.
fn grid_map() -> *mut Eq3dFeatureMap {
    let mut data = Vec::new();
    for r in 0..3 {
        for c in 0..4 {
            let a = (r * 4 + c) as f32 * 0.4;
            data.extend([a.cos(), a.sin()]);
        }
    }
    make_map(2, 1, 4, 3, &data)
}

#[test]
fn version_is_set() {
    let v = unsafe { CStr::from_ptr(eq3d_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn feature_map_roundtrip_and_dims() {
    let m = grid_map();
    let mut dims = [0u32; 6];
    assert_eq!(unsafe { eq3d_feature_map_dims(m, dims.as_mut_ptr()) }, Eq3dStatus::Ok);
    assert_eq!(dims, [3, 4, 2, 1, 4, 3]);
    let mut f = [0.0; 2];
    assert_eq!(
        unsafe { eq3d_sample_feature(m, 2.5, 1.5, false, f.as_mut_ptr(), 2) },
        Eq3dStatus::Ok
    );
    let a = 6.0f32 * 0.4;
    assert!((f[0] - a.cos() as f64).abs() < 1e-7 && (f[1] - a.sin() as f64).abs() < 1e-7);
    assert_eq!(
        unsafe { eq3d_sample_feature(m, 2.5, 1.5, false, f.as_mut_ptr(), 3) },
        Eq3dStatus::InvalidArgument
    );
    unsafe { eq3d_feature_map_free(m) };
}

#[test]
fn best_match_finds_the_query_pixel() {
    let m = grid_map();
    let a = 9.0f64 * 0.4;
    let q = [3.0 * a.cos(), 3.0 * a.sin()];
    let (mut x, mut y, mut s) = (0.0, 0.0, 0.0);
    let st = unsafe { eq3d_best_match(m, q.as_ptr(), 2, 1, &mut x, &mut y, &mut s) };
    assert_eq!(st, Eq3dStatus::Ok, "{}", last_error());
    assert_eq!((x, y), (1.5, 2.5));
    assert!((s - 1.0).abs() < 1e-6);
    let zero = [0.0, 0.0];
    let st = unsafe { eq3d_best_match(m, zero.as_ptr(), 2, 1, &mut x, &mut y, &mut s) };
    assert_eq!(st, Eq3dStatus::DegenerateFeature);
    assert!(last_error().contains("degenerate"));
    unsafe { eq3d_feature_map_free(m) };
}

#[test]
fn null_and_bad_input_report_errors() {
    let mut m = ptr::null_mut();
    let data = [1.0f32; 3];
    let st = unsafe { eq3d_feature_map_new(2, 1, 2, 2, data.as_ptr(), data.len(), &mut m) };
    assert_eq!(st, Eq3dStatus::InvalidArgument);
    assert!(m.is_null());
    let st = unsafe { eq3d_feature_map_new(2, 1, 2, 2, ptr::null(), 8, &mut m) };
    assert_eq!(st, Eq3dStatus::NullArgument);
    let path = CString::new("/nonexistent/x.ftb").unwrap();
    assert_eq!(unsafe { eq3d_feature_map_load(path.as_ptr(), &mut m) }, Eq3dStatus::Io);
    let mut dims = [0u32; 6];
    assert_eq!(
        unsafe { eq3d_feature_map_dims(ptr::null(), dims.as_mut_ptr()) },
        Eq3dStatus::NullArgument
    );
    unsafe { eq3d_feature_map_free(ptr::null_mut()) };
    unsafe { eq3d_head_free(ptr::null_mut()) };
}

#[test]
fn ape_pcdp_match_hand_values() {
    // 100x50 image: min side 50. Errors 0, 5 and 10 px.
    let gt = [10.0, 10.0, 20.0, 20.0, 30.0, 30.0];
    let pred = [10.0, 10.0, 23.0, 24.0, 30.0, 40.0];
    let (mut a, mut p) = (0.0, 0.0);
    let st = unsafe { eq3d_ape_pcdp(gt.as_ptr(), pred.as_ptr(), 3, 100, 50, 0.2, &mut a, &mut p) };
    assert_eq!(st, Eq3dStatus::Ok, "{}", last_error());
    assert!((a - 10.0).abs() < 1e-12, "{a}");
    // 10 px is exactly 0.2 of the side and fails the strict test.
    assert!((p - 200.0 / 3.0).abs() < 1e-12, "{p}");
}

#[test]
fn smooth_ap_single_tie_is_two_thirds() {
    let q = [1.0, 0.0];
    let pos = [0.6, 0.8];
    let neg = [0.6, -0.8];
    let mut loss = 0.0;
    let mut dq = [0.0; 2];
    let st = unsafe {
        eq3d_smooth_ap_loss(
            q.as_ptr(),
            pos.as_ptr(),
            1,
            neg.as_ptr(),
            1,
            2,
            1.0,
            false,
            &mut loss,
            dq.as_mut_ptr(),
            ptr::null_mut(),
            ptr::null_mut(),
        )
    };
    assert_eq!(st, Eq3dStatus::Ok, "{}", last_error());
    assert!((loss - 1.0 / 3.0).abs() < 1e-12);
    assert!(dq.iter().all(|v| v.is_finite()));
    let st = unsafe {
        eq3d_smooth_ap_loss(
            q.as_ptr(),
            pos.as_ptr(),
            1,
            neg.as_ptr(),
            1,
            2,
            0.0,
            false,
            &mut loss,
            ptr::null_mut(),
            ptr::null_mut(),
            ptr::null_mut(),
        )
    };
    assert_eq!(st, Eq3dStatus::InvalidArgument);
}

#[test]
fn pnp_recovers_identity_pose() {
    let k = Eq3dIntrinsics {
        fx: 100.0,
        fy: 100.0,
        cx: 50.0,
        cy: 50.0,
        width: 100,
        height: 100,
    };
    let mut pixels = Vec::new();
    let mut points = Vec::new();
    for i in 0..20 {
        let p = [
            ((i * 7) % 5) as f64 * 0.2 - 0.4,
            ((i * 3) % 7) as f64 * 0.1 - 0.3,
            4.0 + ((i * 5) % 3) as f64 * 0.3,
        ];
        pixels.extend([100.0 * p[0] / p[2] + 50.0, 100.0 * p[1] / p[2] + 50.0]);
        points.extend(p);
    }
    let cfg = Eq3dRansacConfig {
        iterations: 200,
        inlier_threshold: 1.0,
        seed: 5,
        refine: true,
    };
    let (mut r, mut t, mut n) = ([0.0; 9], [0.0; 3], 0usize);
    let st = unsafe {
        eq3d_pnp_ransac(
            pixels.as_ptr(),
            points.as_ptr(),
            20,
            &k,
            &cfg,
            r.as_mut_ptr(),
            t.as_mut_ptr(),
            &mut n,
        )
    };
    assert_eq!(st, Eq3dStatus::Ok, "{}", last_error());
    assert_eq!(n, 20);
    for i in 0..3 {
        for j in 0..3 {
            assert!((r[3 * i + j] - (i == j) as u8 as f64).abs() < 1e-6);
        }
        assert!(t[i].abs() < 1e-6);
    }
    let st = unsafe {
        eq3d_pnp_ransac(
            pixels.as_ptr(),
            points.as_ptr(),
            4,
            &k,
            &cfg,
            r.as_mut_ptr(),
            t.as_mut_ptr(),
            &mut n,
        )
    };
    assert_eq!(st, Eq3dStatus::InsufficientCorrespondences);
}

#[test]
fn zero_init_head_is_identity() {
    let m = grid_map();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { eq3d_head_zero_init(2, 1, &mut h) }, Eq3dStatus::Ok);
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { eq3d_head_apply(h, m, &mut out) }, Eq3dStatus::Ok);
    let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
    unsafe {
        eq3d_sample_feature(m, 3.2, 0.7, false, a.as_mut_ptr(), 2);
        eq3d_sample_feature(out, 3.2, 0.7, false, b.as_mut_ptr(), 2);
    }
    assert_eq!(a, b);
    let mut wrong = ptr::null_mut();
    let mut h3 = ptr::null_mut();
    assert_eq!(unsafe { eq3d_head_zero_init(3, 1, &mut h3) }, Eq3dStatus::Ok);
    assert_eq!(unsafe { eq3d_head_apply(h3, m, &mut wrong) }, Eq3dStatus::InvalidArgument);
    unsafe {
        eq3d_head_free(h);
        eq3d_head_free(h3);
        eq3d_feature_map_free(m);
        eq3d_feature_map_free(out);
    }
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/equiv3d.h");
    let src = include_str!("../src/lib.rs");
    let mut n = 0;
    for line in src.lines() {
        let Some(rest) = line.split("extern \"C\" fn ").nth(1) else { continue };
        let name = rest.split('(').next().unwrap();
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
        n += 1;
    }
    assert!(n >= 14, "{n}");
    assert!(header.contains("typedef struct Eq3dFeatureMap Eq3dFeatureMap;"));
}
