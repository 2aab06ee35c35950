//! Independent reference computations shared by the integration tests. None
//! of these call the library routine they are used to check.

#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use equiv3d::featstore::FeatureMap;
use equiv3d::geometry::{Intrinsics, Primitive, RigidPose};
use nalgebra::{Matrix3, Vector3};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_equiv3d")
}

pub fn run_cli(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

pub fn run_cli_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin()).current_dir(dir).args(args).output().expect("binary runs")
}

/// Nearest `t > 1e-9` where the ray hits the sphere.
pub fn ray_sphere(o: &Vector3<f64>, d: &Vector3<f64>, c: &Vector3<f64>, r: f64) -> Option<f64> {
    let oc = o - c;
    let a = d.dot(d);
    let b = 2.0 * oc.dot(d);
    let cc = oc.dot(&oc) - r * r;
    let disc = b * b - 4.0 * a * cc;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    [(-b - s) / (2.0 * a), (-b + s) / (2.0 * a)].into_iter().find(|&t| t > 1e-9)
}

/// Slab test for an axis-aligned box.
pub fn ray_box(o: &Vector3<f64>, d: &Vector3<f64>, lo: &Vector3<f64>, hi: &Vector3<f64>) -> Option<f64> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        if d[k].abs() < 1e-300 {
            if o[k] < lo[k] || o[k] > hi[k] {
                return None;
            }
            continue;
        }
        let (a, b) = ((lo[k] - o[k]) / d[k], (hi[k] - o[k]) / d[k]);
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    if t0 > t1 {
        return None;
    }
    [t0, t1].into_iter().find(|&t| t > 1e-9)
}

pub fn ray_scene(prims: &[Primitive], o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
    prims
        .iter()
        .filter_map(|p| match p {
            Primitive::Sphere { center, radius } => ray_sphere(o, d, center, *radius),
            Primitive::Box { min, max } => ray_box(o, d, min, max),
            Primitive::Plane { normal, offset } => {
                let den = normal.dot(d);
                (den.abs() > 1e-300).then(|| (offset - normal.dot(o)) / den).filter(|&t| t > 1e-9)
            }
        })
        .reduce(f64::min)
}

/// World-space ray through pixel coordinates `(u, v)`.
pub fn pixel_ray(k: &Intrinsics, pose: &RigidPose, u: f64, v: f64) -> (Vector3<f64>, Vector3<f64>) {
    let rt = pose.rotation.transpose();
    let dir_cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
    (-(rt * pose.translation), rt * dir_cam)
}

pub fn rot_from_quat(w: f64, x: f64, y: f64, z: f64) -> Matrix3<f64> {
    let n = (w * w + x * x + y * y + z * z).sqrt();
    let (w, x, y, z) = (w / n, x / n, y / n, z / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Bilinear feature at image point `(u, v)`: grid coordinate `u / p - 0.5`,
/// clamped to the grid, computed directly from the raw buffer.
pub fn sample_oracle(m: &FeatureMap, u: f64, v: f64) -> Vec<f64> {
    let axis = |x: f64, n: usize| -> (usize, usize, f64) {
        let g = (x / m.patch as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = g.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, g - i0 as f64)
    };
    let (c0, c1, fx) = axis(u, m.wf);
    let (r0, r1, fy) = axis(v, m.hf);
    let at = |r: usize, c: usize, ch: usize| m.data[(r * m.wf + c) * m.channels + ch] as f64;
    (0..m.channels)
        .map(|ch| {
            (1.0 - fy) * ((1.0 - fx) * at(r0, c0, ch) + fx * at(r0, c1, ch))
                + fy * ((1.0 - fx) * at(r1, c0, ch) + fx * at(r1, c1, ch))
        })
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Argmax of cosine over all pixel centers; first strict maximum in
/// row-major order wins.
pub fn argmax_oracle(q: &[f64], t: &FeatureMap) -> (usize, usize, f64) {
    let mut best = (0, 0, f64::NEG_INFINITY);
    for r in 0..t.img_h {
        for c in 0..t.img_w {
            let s = cosine(q, &sample_oracle(t, c as f64 + 0.5, r as f64 + 0.5));
            if s > best.2 {
                best = (c, r, s);
            }
        }
    }
    best
}

/// Average precision by sorting: positives and negatives ranked by score,
/// negatives first on ties.
pub fn ap_oracle(pos: &[f64], neg: &[f64]) -> f64 {
    let mut items: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    items.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, (_, is_pos)) in items.iter().enumerate() {
        if *is_pos {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    sum / pos.len() as f64
}

/// Direct 3x3 zero-padded convolution `out[y][x][o] = b[o] + sum w[o][i][ky][kx] in[y+ky-1][x+kx-1][i]`.
pub fn conv_oracle(input: &[f64], h: usize, w: usize, c_in: usize, weights: &[f64], bias: &[f64]) -> Vec<f64> {
    let c_out = bias.len();
    let mut out = vec![0.0; h * w * c_out];
    for y in 0..h {
        for x in 0..w {
            for o in 0..c_out {
                let mut s = bias[o];
                for i in 0..c_in {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let v = input[((sy as usize) * w + sx as usize) * c_in + i];
                            s += weights[((o * c_in + i) * 3 + ky) * 3 + kx] * v;
                        }
                    }
                }
                out[(y * w + x) * c_out + o] = s;
            }
        }
    }
    out
}
