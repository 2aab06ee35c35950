//! Pinhole camera math, depth maps and ground-truth correspondences.
//!
//! Image coordinates are continuous: pixel `(col, row)` covers
//! `[col, col + 1) x [row, row + 1)` and its center is `(col + 0.5, row + 0.5)`.
//! Projection, back-projection, depth lookup and ray casting all use this one
//! convention. Depth maps store optical-axis `Z`, not ray length.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::featstore::FeatureMap;

pub type Pixel = Vector2<f64>;

/// Center of the pixel at integer `(col, row)`.
pub fn pixel_center(col: usize, row: usize) -> Pixel {
    Pixel::new(col as f64 + 0.5, row as f64 + 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Centered principal point with a horizontal field of view in degrees.
    pub fn from_fov(width: usize, height: usize, hfov_deg: f64) -> Result<Self> {
        let f = 0.5 * width as f64 / (0.5 * hfov_deg.to_radians()).tan();
        Self::new(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::config(format!("invalid focal lengths ({}, {})", self.fx, self.fy)));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::config(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn contains(&self, x: &Pixel) -> bool {
        x.x >= 0.0 && x.y >= 0.0 && x.x < self.width as f64 && x.y < self.height as f64
    }

    pub fn min_side(&self) -> usize {
        self.width.min(self.height)
    }

    /// `K^-1 [x; 1]`: the camera-frame ray with unit `Z`.
    pub fn unproject(&self, x: &Pixel) -> Vector3<f64> {
        Vector3::new((x.x - self.cx) / self.fx, (x.y - self.cy) / self.fy, 1.0)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

/// World-to-camera rigid transform: `p_cam = R * p_world + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Checked constructor; the rotation must be orthonormal with det +1
    /// within `1e-9`.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let resid = orthonormality_residual(&rotation);
        if resid > 1e-9 {
            return Err(Error::InvalidRotation(resid));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("translation"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Camera at `eye` looking at `target`; image `y` points away from `up`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let mut x = z.cross(&up);
        if x.norm() < 1e-9 {
            // Looking along `up`: any perpendicular reference works.
            let alt = if z.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
            x = z.cross(&alt);
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self {
            rotation,
            translation: -(rotation * eye),
        }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

/// `max(|R^T R - I|, |det R - 1|)`.
pub fn orthonormality_residual(r: &Matrix3<f64>) -> f64 {
    let ortho = (r.transpose() * r - Matrix3::identity()).amax();
    ortho.max((r.determinant() - 1.0).abs())
}

/// Back-project continuous pixel `x` at optical-axis depth `depth` to world
/// coordinates: `R^T (depth * K^-1 [x; 1] - t)`.
pub fn backproject(x: &Pixel, depth: f64, k: &Intrinsics, pose: &RigidPose) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::InvalidDepth(depth));
    }
    let cam = k.unproject(x) * depth;
    Ok(pose.rotation.transpose() * (cam - pose.translation))
}

/// Project a world point. Returns the pixel and the camera-frame `Z`; a
/// negative `Z` means the point is behind the camera and callers must treat
/// it as not visible.
pub fn project(p: &Vector3<f64>, k: &Intrinsics, pose: &RigidPose) -> Result<(Pixel, f64)> {
    let c = pose.transform(p);
    if c.z.abs() < 1e-12 {
        return Err(Error::BehindCamera(c.z));
    }
    let x = Pixel::new(k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy);
    Ok((x, c.z))
}

/// Geodesic angle between two rotations, in degrees.
pub fn rotation_error_deg(ra: &Matrix3<f64>, rb: &Matrix3<f64>) -> Result<f64> {
    for r in [ra, rb] {
        let resid = orthonormality_residual(r);
        if !(resid <= 1e-6) {
            return Err(Error::InvalidRotation(resid));
        }
    }
    let c = (((ra.transpose() * rb).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    Ok(c.acos().to_degrees())
}

/// Row-major optical-axis depth. Nonpositive values mark background.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

const DPT1_MAGIC: &[u8; 4] = b"DPT1";

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::config(format!(
                "depth map has {} values, expected {}x{}",
                values.len(),
                width,
                height
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("depth map"));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn is_valid(&self, col: usize, row: usize) -> bool {
        self.get(col, row) > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }

    /// Bilinear depth at continuous coordinates. Returns `None` when any
    /// neighbor with nonzero weight is background, so silhouettes are never
    /// interpolated across.
    pub fn sample_bilinear(&self, x: &Pixel) -> Option<f64> {
        let (c0, c1, wx) = bilinear_axis(x.x - 0.5, self.width);
        let (r0, r1, wy) = bilinear_axis(x.y - 0.5, self.height);
        let mut acc = 0.0;
        for (r, w_r) in [(r0, 1.0 - wy), (r1, wy)] {
            for (c, w_c) in [(c0, 1.0 - wx), (c1, wx)] {
                let w = w_r * w_c;
                if w == 0.0 {
                    continue;
                }
                let d = self.get(c, r);
                if d <= 0.0 {
                    return None;
                }
                acc += w * d;
            }
        }
        Some(acc)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.values.len());
        out.extend_from_slice(DPT1_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for &v in &self.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::format(bytes.len(), "truncated DPT1 header"));
        }
        if &bytes[..4] != DPT1_MAGIC {
            return Err(Error::format(0, "bad magic, expected DPT1"));
        }
        let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let n = width
            .checked_mul(height)
            .ok_or_else(|| Error::format(4, "dimensions overflow"))?;
        let need = 12 + 4 * n;
        if bytes.len() < need {
            return Err(Error::format(bytes.len(), format!("truncated payload, expected {need} bytes")));
        }
        if bytes.len() > need {
            return Err(Error::format(need, "trailing bytes after payload"));
        }
        let mut values = Vec::with_capacity(n);
        for (i, chunk) in bytes[12..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format(12 + 4 * i, "non-finite depth"));
            }
            values.push(v as f64);
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }
}

/// Lower index, upper index and upper weight along one axis of a grid with
/// `n` samples at integer positions, clamping at the borders. Weights within
/// `1e-9` of an integer snap to it so exact pixel centers touch one sample.
pub(crate) fn bilinear_axis(g: f64, n: usize) -> (usize, usize, f64) {
    let g = g.clamp(0.0, (n - 1) as f64);
    let mut i0 = g.floor();
    let mut frac = g - i0;
    if frac < 1e-9 {
        frac = 0.0;
    } else if frac > 1.0 - 1e-9 {
        i0 += 1.0;
        frac = 0.0;
    }
    let i0 = (i0 as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, frac)
}

/// Write via a sibling temp file and rename so readers never see partial files.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// One camera view with optional depth and features.
#[derive(Debug, Clone)]
pub struct ViewRecord {
    pub id: String,
    pub intrinsics: Intrinsics,
    pub pose: RigidPose,
    pub depth: Option<DepthMap>,
    pub features: Option<FeatureMap>,
}

impl ViewRecord {
    pub fn depth_checked(&self) -> Result<&DepthMap> {
        let d = self
            .depth
            .as_ref()
            .ok_or_else(|| Error::config(format!("view {} has no depth map", self.id)))?;
        if d.width != self.intrinsics.width || d.height != self.intrinsics.height {
            return Err(Error::config(format!(
                "view {}: depth is {}x{} but intrinsics are {}x{}",
                self.id, d.width, d.height, self.intrinsics.width, self.intrinsics.height
            )));
        }
        Ok(d)
    }

    pub fn features_checked(&self) -> Result<&FeatureMap> {
        self.features
            .as_ref()
            .ok_or_else(|| Error::config(format!("view {} has no feature map", self.id)))
    }
}

/// All views of one object.
#[derive(Debug, Clone)]
pub struct ObjectViews {
    pub id: String,
    pub views: Vec<ViewRecord>,
}

/// Depth agreement tolerance for the occlusion test:
/// `|Z - depth| <= max(abs, rel * Z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcclusionTolerance {
    pub abs: f64,
    pub rel: f64,
}

impl Default for OcclusionTolerance {
    fn default() -> Self {
        Self { abs: 1e-4, rel: 0.01 }
    }
}

impl OcclusionTolerance {
    pub fn bound(&self, z: f64) -> f64 {
        self.abs.max(self.rel * z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    pub x1: Pixel,
    pub x2: Pixel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub view_a: String,
    pub view_b: String,
    pub pairs: Vec<Correspondence>,
    /// Width and height of view B.
    pub image_w: usize,
    pub image_h: usize,
    /// Valid-depth grid pixels of A that failed visibility in B.
    pub rejected: usize,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn min_side(&self) -> usize {
        self.image_w.min(self.image_h)
    }
}

/// Where a grid pixel of A lands in B, or why it was rejected.
fn transfer_pixel(
    x1: &Pixel,
    depth: f64,
    a: &ViewRecord,
    b: &ViewRecord,
    depth_b: &DepthMap,
    occ: &OcclusionTolerance,
) -> Option<Pixel> {
    let p = backproject(x1, depth, &a.intrinsics, &a.pose).ok()?;
    let (x2, z) = project(&p, &b.intrinsics, &b.pose).ok()?;
    if z <= 0.0 || !b.intrinsics.contains(&x2) {
        return None;
    }
    let db = depth_b.sample_bilinear(&x2)?;
    ((z - db).abs() <= occ.bound(z)).then_some(x2)
}

/// Ground-truth pixel correspondences from A to B on a stride grid anchored
/// at pixel 0. Each valid-depth pixel of A is back-projected, projected into
/// B and kept only if it survives the occlusion test against B's depth.
pub fn gt_correspondences(
    a: &ViewRecord,
    b: &ViewRecord,
    stride: usize,
    occ: &OcclusionTolerance,
) -> Result<CorrespondenceSet> {
    if stride == 0 {
        return Err(Error::config("stride must be at least 1"));
    }
    let depth_a = a.depth_checked()?;
    let depth_b = b.depth_checked()?;
    let rows: Vec<usize> = (0..depth_a.height).step_by(stride).collect();
    let per_row: Vec<(Vec<Correspondence>, usize)> = rows
        .par_iter()
        .map(|&row| {
            let mut kept = Vec::new();
            let mut rejected = 0;
            for col in (0..depth_a.width).step_by(stride) {
                let d = depth_a.get(col, row);
                if d <= 0.0 {
                    continue;
                }
                let x1 = pixel_center(col, row);
                match transfer_pixel(&x1, d, a, b, depth_b, occ) {
                    Some(x2) => kept.push(Correspondence { x1, x2 }),
                    None => rejected += 1,
                }
            }
            (kept, rejected)
        })
        .collect();
    let mut pairs = Vec::new();
    let mut rejected = 0;
    for (kept, rej) in per_row {
        pairs.extend(kept);
        rejected += rej;
    }
    Ok(CorrespondenceSet {
        view_a: a.id.clone(),
        view_b: b.id.clone(),
        pairs,
        image_w: b.intrinsics.width,
        image_h: b.intrinsics.height,
        rejected,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Sphere { center: Vector3<f64>, radius: f64 },
    /// Axis-aligned box.
    Box { min: Vector3<f64>, max: Vector3<f64> },
    /// Two-sided plane `{p : normal . p = offset}` with unit normal.
    Plane { normal: Vector3<f64>, offset: f64 },
}

impl Primitive {
    /// Smallest ray parameter `t > eps` with `origin + t * dir` on the surface.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        const EPS: f64 = 1e-12;
        match self {
            Primitive::Sphere { center, radius } => {
                let oc = origin - center;
                let a = dir.norm_squared();
                let b = 2.0 * dir.dot(&oc);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                // Numerically stable roots.
                let q = -0.5 * (b + b.signum() * disc.sqrt());
                let (mut t0, mut t1) = if q == 0.0 { (0.0, 0.0) } else { (q / a, c / q) };
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                if t0 > EPS {
                    Some(t0)
                } else if t1 > EPS {
                    Some(t1)
                } else {
                    None
                }
            }
            Primitive::Box { min, max } => {
                let mut tmin = f64::NEG_INFINITY;
                let mut tmax = f64::INFINITY;
                for i in 0..3 {
                    if dir[i].abs() < 1e-300 {
                        if origin[i] < min[i] || origin[i] > max[i] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / dir[i];
                    let mut ta = (min[i] - origin[i]) * inv;
                    let mut tb = (max[i] - origin[i]) * inv;
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    tmin = tmin.max(ta);
                    tmax = tmax.min(tb);
                }
                if tmax < tmin {
                    None
                } else if tmin > EPS {
                    Some(tmin)
                } else if tmax > EPS {
                    Some(tmax)
                } else {
                    None
                }
            }
            Primitive::Plane { normal, offset } => {
                let denom = normal.dot(dir);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let t = (offset - normal.dot(origin)) / denom;
                (t > EPS).then_some(t)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Primitive::Sphere { radius, .. } if !(*radius > 0.0) => {
                Err(Error::config(format!("sphere radius {radius} must be positive")))
            }
            Primitive::Box { min, max } if !(0..3).all(|i| min[i] < max[i]) => {
                Err(Error::config("box min must be below max on every axis"))
            }
            Primitive::Plane { normal, .. } if (normal.norm() - 1.0).abs() > 1e-9 => {
                Err(Error::config("plane normal must be unit length"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub primitives: Vec<Primitive>,
}

impl SyntheticScene {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self> {
        if primitives.is_empty() {
            return Err(Error::config("synthetic scene needs at least one primitive"));
        }
        for p in &primitives {
            p.validate()?;
        }
        Ok(Self { primitives })
    }

    /// Nearest hit along a ray over all primitives.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        self.primitives
            .iter()
            .filter_map(|p| p.intersect(origin, dir))
            .min_by(f64::total_cmp)
    }
}

/// Optical-axis depth of the nearest surface at every pixel center; 0 where
/// the ray misses the scene.
pub fn raytrace_depth(scene: &SyntheticScene, k: &Intrinsics, pose: &RigidPose) -> DepthMap {
    let origin = pose.camera_center();
    let rt = pose.rotation.transpose();
    let values: Vec<f64> = (0..k.height)
        .into_par_iter()
        .flat_map_iter(|row| {
            let rt = &rt;
            let origin = &origin;
            (0..k.width).map(move |col| {
                // Camera ray with unit Z, so the ray parameter is the depth.
                let dir = rt * k.unproject(&pixel_center(col, row));
                scene.intersect(origin, &dir).unwrap_or(0.0)
            })
        })
        .collect();
    DepthMap {
        width: k.width,
        height: k.height,
        values,
    }
}

/// `n` camera centers spread evenly over a sphere of `radius` around
/// `target` (Fibonacci lattice), each looking at `target` with world `+Z`
/// as the up reference.
pub fn fibonacci_rig(n: usize, radius: f64, target: Vector3<f64>) -> Vec<RigidPose> {
    let golden_angle = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden_angle * i as f64;
            let eye = target + radius * Vector3::new(r * phi.cos(), r * phi.sin(), z);
            RigidPose::look_at(eye, target, Vector3::z())
        })
        .collect()
}

/// Rotation of `angle_deg` about `axis`.
pub fn axis_angle(axis: Vector3<f64>, angle_deg: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle_deg.to_radians()).into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn k64() -> Intrinsics {
        Intrinsics::new(50.0, 55.0, 32.0, 30.0, 64, 60).unwrap()
    }

    #[test]
    fn principal_ray() {
        let k = k64();
        let p = backproject(&Pixel::new(k.cx, k.cy), 1.0, &k, &RigidPose::identity()).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 1.0));
        let p = backproject(&Pixel::new(k.cx + k.fx, k.cy), 2.0, &k, &RigidPose::identity()).unwrap();
        assert!((p - Vector3::new(2.0, 0.0, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn nonpositive_depth_rejected() {
        let k = k64();
        assert!(matches!(
            backproject(&Pixel::new(1.0, 1.0), 0.0, &k, &RigidPose::identity()),
            Err(Error::InvalidDepth(_))
        ));
        assert!(backproject(&Pixel::new(1.0, 1.0), -2.0, &k, &RigidPose::identity()).is_err());
    }

    #[test]
    fn project_principal_point_and_behind() {
        let k = k64();
        let (x, z) = project(&Vector3::new(0.0, 0.0, 1.0), &k, &RigidPose::identity()).unwrap();
        assert_eq!((x.x, x.y, z), (k.cx, k.cy, 1.0));
        let (_, z) = project(&Vector3::new(0.1, 0.0, -2.0), &k, &RigidPose::identity()).unwrap();
        assert!(z < 0.0);
        assert!(matches!(
            project(&Vector3::new(1.0, 0.0, 0.0), &k, &RigidPose::identity()),
            Err(Error::BehindCamera(_))
        ));
    }

    #[test]
    fn rotation_error_basics() {
        let i = Matrix3::identity();
        assert_eq!(rotation_error_deg(&i, &i).unwrap(), 0.0);
        let rz = axis_angle(Vector3::z(), 10.0);
        assert!((rotation_error_deg(&i, &rz).unwrap() - 10.0).abs() < 1e-9);
        let bad = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(rotation_error_deg(&i, &bad), Err(Error::InvalidRotation(_))));
    }

    #[test]
    fn look_at_points_forward() {
        let eye = Vector3::new(3.0, -1.0, 2.0);
        let pose = RigidPose::look_at(eye, Vector3::zeros(), Vector3::z());
        assert!(orthonormality_residual(&pose.rotation) < 1e-12);
        assert!((pose.camera_center() - eye).norm() < 1e-12);
        let c = pose.transform(&Vector3::zeros());
        assert!(c.x.abs() < 1e-12 && c.y.abs() < 1e-12 && c.z > 0.0);
        // Straight down the up axis still yields a valid rotation.
        let pose = RigidPose::look_at(Vector3::new(0.0, 0.0, 4.0), Vector3::zeros(), Vector3::z());
        assert!(orthonormality_residual(&pose.rotation) < 1e-12);
    }

    #[test]
    fn sphere_center_depth() {
        let scene = SyntheticScene::new(vec![Primitive::Sphere {
            center: Vector3::new(0.0, 0.0, 3.0),
            radius: 1.0,
        }])
        .unwrap();
        // Odd size so a pixel center sits exactly on the principal point.
        let k = Intrinsics::new(40.0, 40.0, 16.5, 16.5, 33, 33).unwrap();
        let d = raytrace_depth(&scene, &k, &RigidPose::identity());
        assert!((d.get(16, 16) - 2.0).abs() < 1e-12);
        assert_eq!(d.get(0, 0), 0.0);
    }

    #[test]
    fn plane_constant_depth() {
        let scene = SyntheticScene::new(vec![Primitive::Plane {
            normal: Vector3::new(0.0, 0.0, -1.0),
            offset: -5.0,
        }])
        .unwrap();
        let k = k64();
        let d = raytrace_depth(&scene, &k, &RigidPose::identity());
        assert!(d.values.iter().all(|v| (v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn scene_validation() {
        assert!(SyntheticScene::new(vec![]).is_err());
        assert!(SyntheticScene::new(vec![Primitive::Sphere {
            center: Vector3::zeros(),
            radius: 0.0
        }])
        .is_err());
        assert!(SyntheticScene::new(vec![Primitive::Box {
            min: Vector3::new(0.0, 0.0, 0.0),
            max: Vector3::new(1.0, 0.0, 1.0)
        }])
        .is_err());
    }

    #[test]
    fn dpt1_roundtrip_and_errors() {
        let d = DepthMap::new(3, 2, vec![1.0, 2.5, 0.0, -1.0, 4.0, 0.25]).unwrap();
        let bytes = d.to_bytes();
        assert_eq!(&bytes[..4], b"DPT1");
        assert_eq!(bytes.len(), 12 + 24);
        let back = DepthMap::from_bytes(&bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_bytes(), bytes);
        assert!(matches!(
            DepthMap::from_bytes(&bytes[..20]),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(DepthMap::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let mut nan = bytes;
        nan[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(DepthMap::from_bytes(&nan), Err(Error::Format { offset: 16, .. })));
    }

    #[test]
    fn bilinear_rejects_silhouette_neighbors() {
        let d = DepthMap::new(2, 1, vec![2.0, 0.0]).unwrap();
        assert_eq!(d.sample_bilinear(&Pixel::new(0.5, 0.5)), Some(2.0));
        assert_eq!(d.sample_bilinear(&Pixel::new(0.9, 0.5)), None);
        let d = DepthMap::new(2, 1, vec![2.0, 4.0]).unwrap();
        assert!((d.sample_bilinear(&Pixel::new(1.0, 0.5)).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn identity_pair_maps_to_itself() {
        let scene = SyntheticScene::new(vec![Primitive::Sphere {
            center: Vector3::zeros(),
            radius: 1.0,
        }])
        .unwrap();
        let k = k64();
        let pose = RigidPose::look_at(Vector3::new(0.0, -4.0, 0.5), Vector3::zeros(), Vector3::z());
        let view = ViewRecord {
            id: "a".into(),
            intrinsics: k,
            pose,
            depth: Some(raytrace_depth(&scene, &k, &pose)),
            features: None,
        };
        let set = gt_correspondences(&view, &view, 4, &OcclusionTolerance::default()).unwrap();
        assert_eq!(set.rejected, 0);
        assert!(!set.is_empty());
        for c in &set.pairs {
            assert!((c.x1 - c.x2).norm() < 1e-9);
        }
        let d = view.depth.as_ref().unwrap();
        let expect = (0..k.height)
            .step_by(4)
            .flat_map(|r| (0..k.width).step_by(4).map(move |c| (c, r)))
            .filter(|&(c, r)| d.is_valid(c, r))
            .count();
        assert_eq!(set.len(), expect);
    }

    #[test]
    fn mismatched_depth_dims() {
        let k = k64();
        let view = ViewRecord {
            id: "a".into(),
            intrinsics: k,
            pose: RigidPose::identity(),
            depth: Some(DepthMap::new(2, 2, vec![1.0; 4]).unwrap()),
            features: None,
        };
        assert!(matches!(
            gt_correspondences(&view, &view, 1, &OcclusionTolerance::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn random_roundtrip() {
        let mut rng = SplitMix64::new(11);
        for _ in 0..1000 {
            let w = 32 + rng.below(600);
            let h = 32 + rng.below(600);
            let k = Intrinsics::new(
                rng.uniform(50.0, 900.0),
                rng.uniform(50.0, 900.0),
                rng.uniform(0.0, w as f64),
                rng.uniform(0.0, h as f64),
                w,
                h,
            )
            .unwrap();
            let axis = Vector3::new(rng.normal(), rng.normal(), rng.normal());
            let pose = RigidPose::new(
                axis_angle(axis, rng.uniform(-180.0, 180.0)),
                Vector3::new(rng.normal(), rng.normal(), rng.normal()),
            )
            .unwrap();
            let x = Pixel::new(rng.uniform(0.0, w as f64), rng.uniform(0.0, h as f64));
            let depth = rng.uniform(0.1, 20.0);
            let p = backproject(&x, depth, &k, &pose).unwrap();
            let (x2, z) = project(&p, &k, &pose).unwrap();
            assert!((x2 - x).norm() < 1e-9);
            assert!((z - depth).abs() < 1e-9 * depth.max(1.0));
        }
    }
}
