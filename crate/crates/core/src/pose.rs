//! One-shot object pose: a feature database built from posed reference views,
//! cosine 2D-3D matching and RANSAC PnP.
//!
//! The minimal solver is a 6-point DLT on normalized camera coordinates. The
//! best hypothesis can be polished by Levenberg-Marquardt style Gauss-Newton
//! on squared pixel reprojection error over its inliers.

use log::warn;
use nalgebra::{Matrix3, Matrix3x4, Rotation3, SMatrix, SVector, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::featstore::{dot, sample_feature, PixelFeature};
use crate::geometry::{backproject, pixel_center, Intrinsics, Pixel, RigidPose, ViewRecord};
use crate::metrics::{pose_errors, pose_accuracy_from_errors, PoseAccuracyReport, SceneUnits};
use crate::rng::SplitMix64;

/// Reference resolution at which the inlier threshold is stated.
pub const WORKING_RESOLUTION: f64 = 512.0;

#[derive(Debug, Clone, Default)]
pub struct PoseDatabase {
    pub features: Vec<PixelFeature>,
    pub points: Vec<Vector3<f64>>,
    pub source_views: Vec<String>,
    pub channels: usize,
}

impl PoseDatabase {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Store the normalized feature and back-projected world point of every
/// valid-depth pixel on the stride grid of each reference view.
pub fn build_database(refs: &[ViewRecord], stride: usize) -> Result<PoseDatabase> {
    if stride == 0 {
        return Err(Error::config("stride must be at least 1"));
    }
    let mut db = PoseDatabase::default();
    for v in refs {
        let Some(depth) = v.depth.as_ref() else {
            warn!("reference view {} has no depth; skipped", v.id);
            continue;
        };
        let depth = v.depth_checked().map(|_| depth)?;
        let f = v.features_checked()?;
        if db.channels == 0 {
            db.channels = f.channels;
        } else if f.channels != db.channels {
            return Err(Error::config(format!(
                "view {}: {} channels, database has {}",
                v.id, f.channels, db.channels
            )));
        }
        let before = db.len();
        for row in (0..depth.height).step_by(stride) {
            for col in (0..depth.width).step_by(stride) {
                let d = depth.get(col, row);
                if d <= 0.0 {
                    continue;
                }
                let x = pixel_center(col, row);
                let Ok(feat) = sample_feature(f, &x, true) else { continue };
                db.points.push(backproject(&x, d, &v.intrinsics, &v.pose)?);
                db.features.push(feat);
            }
        }
        if db.len() == before {
            warn!("reference view {} contributed no database entries", v.id);
        } else {
            db.source_views.push(v.id.clone());
        }
    }
    Ok(db)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Match2d3d {
    pub pixel: Pixel,
    pub point: Vector3<f64>,
    pub score: f64,
    /// Database entry index.
    pub entry: usize,
}

/// Nearest database entry by cosine for each stride-grid pixel of the query.
/// When the query carries a depth map only foreground pixels are matched.
/// Ties go to the lowest entry index. Matches scoring below `score_floor`
/// are dropped.
pub fn match_2d3d(
    query: &ViewRecord,
    db: &PoseDatabase,
    stride: usize,
    score_floor: Option<f64>,
) -> Result<Vec<Match2d3d>> {
    if db.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    if stride == 0 {
        return Err(Error::config("stride must be at least 1"));
    }
    let f = query.features_checked()?;
    if f.channels != db.channels {
        return Err(Error::config(format!(
            "query {} has {} channels, database has {}",
            query.id, f.channels, db.channels
        )));
    }
    let mask = match &query.depth {
        Some(_) => Some(query.depth_checked()?),
        None => None,
    };
    let (w, h) = (query.intrinsics.width, query.intrinsics.height);
    let pixels: Vec<(usize, usize)> = (0..h)
        .step_by(stride)
        .flat_map(|r| (0..w).step_by(stride).map(move |c| (c, r)))
        .filter(|&(c, r)| mask.map_or(true, |d| d.is_valid(c, r)))
        .collect();
    let out: Vec<Option<Match2d3d>> = pixels
        .par_iter()
        .map(|&(c, r)| {
            let x = pixel_center(c, r);
            let q = sample_feature(f, &x, true).ok()?;
            let mut best = (f64::NEG_INFINITY, 0usize);
            for (k, e) in db.features.iter().enumerate() {
                let s = dot(q.as_slice(), e.as_slice());
                if s > best.0 {
                    best = (s, k);
                }
            }
            if score_floor.is_some_and(|fl| best.0 < fl) {
                return None;
            }
            Some(Match2d3d {
                pixel: x,
                point: db.points[best.1],
                score: best.0,
                entry: best.1,
            })
        })
        .collect();
    Ok(out.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Reprojection threshold in pixels of the image being solved.
    pub inlier_threshold: f64,
    pub min_sample: usize,
    pub seed: u64,
    pub refine: bool,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            inlier_threshold: 8.0,
            min_sample: 6,
            seed: 0,
            refine: true,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("RANSAC needs at least one iteration"));
        }
        if !(self.inlier_threshold > 0.0) {
            return Err(Error::config("inlier threshold must be positive"));
        }
        if self.min_sample < 6 {
            return Err(Error::config("the DLT solver needs samples of at least 6 points"));
        }
        Ok(())
    }
}

/// Threshold stated at the working resolution, rescaled to an image whose
/// shorter side is `min_side` pixels.
pub fn scaled_threshold(threshold: f64, min_side: usize, working_resolution: f64) -> f64 {
    threshold * min_side as f64 / working_resolution
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: RigidPose,
    pub inlier_count: usize,
    /// Mean reprojection error over inliers, in pixels.
    pub mean_reproj_err: f64,
    pub inliers: Vec<usize>,
}

/// Pixel reprojection error; points at or behind the camera get infinity.
pub fn reprojection_error(pose: &RigidPose, k: &Intrinsics, x: &Pixel, p: &Vector3<f64>) -> f64 {
    let c = pose.transform(p);
    if !(c.z > 1e-12) {
        return f64::INFINITY;
    }
    let u = Vector2::new(k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy);
    (u - x).norm()
}

/// Points whose 3D spread is essentially planar or lower-dimensional.
fn is_degenerate(points: &[Vector3<f64>]) -> bool {
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    let ev = cov.symmetric_eigenvalues();
    let max = ev.max();
    !(max > 0.0) || ev.min() / max < 1e-6
}

/// Direct linear transform on `>= 6` correspondences.
pub fn dlt_pose(pixels: &[Pixel], points: &[Vector3<f64>], k: &Intrinsics) -> Option<RigidPose> {
    let n = pixels.len();
    if n < 6 || points.len() != n {
        return None;
    }
    let rays: Vec<Vector2<f64>> = pixels
        .iter()
        .map(|x| Vector2::new((x.x - k.cx) / k.fx, (x.y - k.cy) / k.fy))
        .collect();

    // Hartley normalization of both point sets.
    let c2 = rays.iter().sum::<Vector2<f64>>() / n as f64;
    let s2 = rays.iter().map(|r| (r - c2).norm()).sum::<f64>() / n as f64;
    let c3 = points.iter().sum::<Vector3<f64>>() / n as f64;
    let s3 = points.iter().map(|p| (p - c3).norm()).sum::<f64>() / n as f64;
    if !(s2 > 0.0 && s3 > 0.0) {
        return None;
    }
    let (a2, a3) = (std::f64::consts::SQRT_2 / s2, 3f64.sqrt() / s3);

    let mut ata = SMatrix::<f64, 12, 12>::zeros();
    for (r, p) in rays.iter().zip(points) {
        let u = (r - c2) * a2;
        let q = (p - c3) * a3;
        let xh = [q.x, q.y, q.z, 1.0];
        let mut row1 = SVector::<f64, 12>::zeros();
        let mut row2 = SVector::<f64, 12>::zeros();
        for j in 0..4 {
            row1[j] = xh[j];
            row1[8 + j] = -u.x * xh[j];
            row2[4 + j] = xh[j];
            row2[8 + j] = -u.y * xh[j];
        }
        ata += row1 * row1.transpose() + row2 * row2.transpose();
    }
    let eig = ata.symmetric_eigen();
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    let h = eig.eigenvectors.column(imin);
    let pn = Matrix3x4::from_fn(|r, c| h[4 * r + c]);

    // Undo normalization: P = T2^-1 * Pn * T3.
    let t2_inv = Matrix3::new(1.0 / a2, 0.0, c2.x, 0.0, 1.0 / a2, c2.y, 0.0, 0.0, 1.0);
    let mut t3 = nalgebra::Matrix4::identity() * a3;
    t3[(3, 3)] = 1.0;
    for i in 0..3 {
        t3[(i, 3)] = -a3 * c3[i];
    }
    let mut p = t2_inv * pn * t3;
    let depth_c = (p * c3.push(1.0)).z;
    if depth_c < 0.0 {
        p = -p;
    }
    let m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into();
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut rot = u * vt;
    if rot.determinant() < 0.0 {
        return None;
    }
    let scale = svd.singular_values.mean();
    if !(scale > 0.0) {
        return None;
    }
    // Re-orthonormalize once more to clear rounding.
    let r3 = Rotation3::from_matrix(&rot);
    rot = *r3.matrix();
    let t: Vector3<f64> = p.column(3) / scale;
    Some(RigidPose {
        rotation: rot,
        translation: t,
    })
}

fn inliers_of(
    pose: &RigidPose,
    k: &Intrinsics,
    pixels: &[Pixel],
    points: &[Vector3<f64>],
    thr: f64,
) -> Vec<usize> {
    (0..pixels.len())
        .filter(|&i| reprojection_error(pose, k, &pixels[i], &points[i]) <= thr)
        .collect()
}

fn sq_cost(pose: &RigidPose, k: &Intrinsics, pixels: &[Pixel], points: &[Vector3<f64>], idx: &[usize]) -> f64 {
    idx.iter()
        .map(|&i| reprojection_error(pose, k, &pixels[i], &points[i]).powi(2))
        .sum()
}

/// Damped Gauss-Newton on the summed squared reprojection error over `idx`.
/// Never returns a pose with higher cost than `init`.
pub fn refine_pose(
    init: &RigidPose,
    k: &Intrinsics,
    pixels: &[Pixel],
    points: &[Vector3<f64>],
    idx: &[usize],
) -> RigidPose {
    let mut pose = *init;
    let mut cost = sq_cost(&pose, k, pixels, points, idx);
    if !cost.is_finite() {
        return pose;
    }
    let mut lambda = 1e-6;
    for _ in 0..100 {
        let mut jtj = SMatrix::<f64, 6, 6>::zeros();
        let mut jtr = SVector::<f64, 6>::zeros();
        for &i in idx {
            let rp = pose.rotation * points[i];
            let c = rp + pose.translation;
            let iz = 1.0 / c.z;
            let res = Vector2::new(
                k.fx * c.x * iz + k.cx - pixels[i].x,
                k.fy * c.y * iz + k.cy - pixels[i].y,
            );
            let dproj = nalgebra::Matrix2x3::new(
                k.fx * iz,
                0.0,
                -k.fx * c.x * iz * iz,
                0.0,
                k.fy * iz,
                -k.fy * c.y * iz * iz,
            );
            // d c / d omega = -[R p]_x for R <- exp(omega) R; d c / d t = I.
            let mut dc = nalgebra::Matrix3x6::zeros();
            dc.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rp.cross_matrix()));
            dc.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
            let j = dproj * dc;
            jtj += j.transpose() * j;
            jtr += j.transpose() * res;
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut a = jtj;
            for d in 0..6 {
                a[(d, d)] += lambda * (1.0 + jtj[(d, d)]);
            }
            let Some(step) = a.cholesky().map(|ch| ch.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let omega = Vector3::new(step[0], step[1], step[2]);
            let cand = RigidPose {
                rotation: Rotation3::new(omega).matrix() * pose.rotation,
                translation: pose.translation + Vector3::new(step[3], step[4], step[5]),
            };
            let c_new = sq_cost(&cand, k, pixels, points, idx);
            if c_new <= cost {
                let rel = (cost - c_new) / cost.max(1e-300);
                pose = cand;
                cost = c_new;
                lambda = (lambda * 0.1).max(1e-12);
                improved = rel > 1e-15 && step.norm() > 1e-15;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    let r = Rotation3::from_matrix(&pose.rotation);
    let cand = RigidPose {
        rotation: *r.matrix(),
        translation: pose.translation,
    };
    if sq_cost(&cand, k, pixels, points, idx) <= cost {
        cand
    } else {
        pose
    }
}

/// RANSAC over 6-point DLT hypotheses. Each iteration draws its sample from
/// its own counter-based stream, so the result does not depend on thread
/// count; the best hypothesis has the most inliers, ties going to the lowest
/// iteration index.
pub fn solve_pnp_ransac(
    pixels: &[Pixel],
    points: &[Vector3<f64>],
    k: &Intrinsics,
    cfg: &RansacConfig,
) -> Result<PoseEstimate> {
    cfg.validate()?;
    if pixels.len() != points.len() {
        return Err(Error::config("pixel and point counts differ"));
    }
    let n = pixels.len();
    if n < cfg.min_sample {
        return Err(Error::InsufficientCorrespondences {
            needed: cfg.min_sample,
            got: n,
        });
    }
    let thr = cfg.inlier_threshold;
    let best = (0..cfg.iterations)
        .into_par_iter()
        .filter_map(|it| {
            let mut rng = SplitMix64::stream(cfg.seed, it as u64);
            let idx = rng.sample_distinct(n, cfg.min_sample);
            let sp: Vec<Vector3<f64>> = idx.iter().map(|&i| points[i]).collect();
            if is_degenerate(&sp) {
                return None;
            }
            let sx: Vec<Pixel> = idx.iter().map(|&i| pixels[i]).collect();
            let pose = dlt_pose(&sx, &sp, k)?;
            let count = (0..n)
                .filter(|&i| reprojection_error(&pose, k, &pixels[i], &points[i]) <= thr)
                .count();
            Some((count, it, pose))
        })
        .reduce_with(|a, b| {
            if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                b
            } else {
                a
            }
        });
    let Some((_, _, mut pose)) = best else {
        return Err(Error::config("every RANSAC sample was degenerate"));
    };
    let mut inliers = inliers_of(&pose, k, pixels, points, thr);
    if cfg.refine && inliers.len() >= cfg.min_sample {
        let base = sq_cost(&pose, k, pixels, points, &inliers);
        let mut cand = pose;
        let ip: Vec<Pixel> = inliers.iter().map(|&i| pixels[i]).collect();
        let iq: Vec<Vector3<f64>> = inliers.iter().map(|&i| points[i]).collect();
        if !is_degenerate(&iq) {
            if let Some(p) = dlt_pose(&ip, &iq, k) {
                if sq_cost(&p, k, pixels, points, &inliers) < base {
                    cand = p;
                }
            }
        }
        cand = refine_pose(&cand, k, pixels, points, &inliers);
        if sq_cost(&cand, k, pixels, points, &inliers) <= base {
            pose = cand;
            // One more pass on the (possibly grown) inlier set.
            let grown = inliers_of(&pose, k, pixels, points, thr);
            if grown.len() >= inliers.len() {
                let again = refine_pose(&pose, k, pixels, points, &grown);
                let regrown = inliers_of(&again, k, pixels, points, thr);
                if regrown.len() >= grown.len() {
                    pose = again;
                    inliers = regrown;
                } else {
                    inliers = grown;
                }
            }
        }
    }
    let mean_reproj_err = if inliers.is_empty() {
        0.0
    } else {
        inliers
            .iter()
            .map(|&i| reprojection_error(&pose, k, &pixels[i], &points[i]))
            .sum::<f64>()
            / inliers.len() as f64
    };
    Ok(PoseEstimate {
        pose,
        inlier_count: inliers.len(),
        mean_reproj_err,
        inliers,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseTaskConfig {
    pub stride: usize,
    pub score_floor: Option<f64>,
    pub ransac: RansacConfig,
    /// Resolution at which `ransac.inlier_threshold` is stated.
    pub working_resolution: f64,
}

impl Default for PoseTaskConfig {
    fn default() -> Self {
        Self {
            stride: 4,
            score_floor: None,
            ransac: RansacConfig::default(),
            working_resolution: WORKING_RESOLUTION,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PoseFrameResult {
    pub view: String,
    pub estimate: Option<PoseEstimate>,
    /// Translation (cm) and rotation (deg) errors, when an estimate exists.
    pub errors: Option<(f64, f64)>,
}

/// Match, solve and score each query against its ground-truth pose. Frames
/// without a usable estimate count as wrong at every threshold.
pub fn evaluate_pose_task(
    queries: &[ViewRecord],
    db: &PoseDatabase,
    cfg: &PoseTaskConfig,
    units: SceneUnits,
) -> Result<(PoseAccuracyReport, Vec<PoseFrameResult>)> {
    if db.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    let mut frames = Vec::with_capacity(queries.len());
    for q in queries {
        let matches = match_2d3d(q, db, cfg.stride, cfg.score_floor)?;
        let px: Vec<Pixel> = matches.iter().map(|m| m.pixel).collect();
        let pts: Vec<Vector3<f64>> = matches.iter().map(|m| m.point).collect();
        let ransac = RansacConfig {
            inlier_threshold: scaled_threshold(
                cfg.ransac.inlier_threshold,
                q.intrinsics.min_side(),
                cfg.working_resolution,
            ),
            ..cfg.ransac.clone()
        };
        let estimate = match solve_pnp_ransac(&px, &pts, &q.intrinsics, &ransac) {
            Ok(e) if e.inlier_count > ransac.min_sample => Some(e),
            Ok(e) => {
                warn!("query {}: only {} inliers; counted as failure", q.id, e.inlier_count);
                None
            }
            Err(e @ (Error::InsufficientCorrespondences { .. } | Error::Config(_))) => {
                warn!("query {}: {e}; counted as failure", q.id);
                None
            }
            Err(e) => return Err(e),
        };
        let errors = estimate
            .as_ref()
            .map(|e| pose_errors(&e.pose, &q.pose, units))
            .transpose()?;
        frames.push(PoseFrameResult {
            view: q.id.clone(),
            estimate,
            errors,
        });
    }
    let errs: Vec<Option<(f64, f64)>> = frames.iter().map(|f| f.errors).collect();
    Ok((pose_accuracy_from_errors(&errs), frames))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{axis_angle, project};

    fn scene(n: usize, seed: u64) -> (Intrinsics, RigidPose, Vec<Pixel>, Vec<Vector3<f64>>) {
        let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        let pose = RigidPose::new(
            axis_angle(Vector3::new(0.3, -0.5, 0.8), 27.0),
            Vector3::new(0.1, -0.2, 4.0),
        )
        .unwrap();
        let mut rng = SplitMix64::new(seed);
        let mut px = Vec::new();
        let mut pts = Vec::new();
        while pts.len() < n {
            let p = Vector3::new(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
            let (x, _) = project(&p, &k, &pose).unwrap();
            if k.contains(&x) {
                px.push(x);
                pts.push(p);
            }
        }
        (k, pose, px, pts)
    }

    #[test]
    fn dlt_is_exact_on_clean_data() {
        let (k, pose, px, pts) = scene(6, 1);
        let est = dlt_pose(&px, &pts, &k).unwrap();
        assert!(crate::geometry::rotation_error_deg(&est.rotation, &pose.rotation).unwrap() < 1e-6);
        assert!((est.translation - pose.translation).norm() < 1e-8);
    }

    #[test]
    fn coplanar_sample_is_degenerate() {
        let pts: Vec<Vector3<f64>> = (0..6).map(|i| Vector3::new(i as f64, (i * i) as f64, 0.0)).collect();
        assert!(is_degenerate(&pts));
        let (_, _, _, pts) = scene(6, 2);
        assert!(!is_degenerate(&pts));
    }

    #[test]
    fn too_few_points() {
        let (k, _, px, pts) = scene(5, 3);
        assert!(matches!(
            solve_pnp_ransac(&px, &pts, &k, &RansacConfig::default()),
            Err(Error::InsufficientCorrespondences { needed: 6, got: 5 })
        ));
    }

    #[test]
    fn refinement_never_increases_cost() {
        let (k, pose, mut px, pts) = scene(30, 4);
        let mut rng = SplitMix64::new(9);
        for x in px.iter_mut() {
            x.x += rng.normal() * 0.5;
            x.y += rng.normal() * 0.5;
        }
        let idx: Vec<usize> = (0..30).collect();
        let start = dlt_pose(&px[..6], &pts[..6], &k).unwrap();
        let refined = refine_pose(&start, &k, &px, &pts, &idx);
        assert!(sq_cost(&refined, &k, &px, &pts, &idx) <= sq_cost(&start, &k, &px, &pts, &idx));
        assert!(crate::geometry::rotation_error_deg(&refined.rotation, &pose.rotation).unwrap() < 0.5);
    }

    #[test]
    fn threshold_scaling() {
        assert_eq!(scaled_threshold(8.0, 512, 512.0), 8.0);
        assert_eq!(scaled_threshold(8.0, 256, 512.0), 4.0);
    }
}
