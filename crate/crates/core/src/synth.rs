//! Analytic fixtures: ray-traced scenes seen from a Fibonacci camera rig,
//! with optional "oracle" features that encode each pixel's world point.
//!
//! Oracle features are random Fourier features `cos(w . P + phi)`,
//! `sin(w . P + phi)` of the surface point `P` seen through each patch
//! center, plus one background channel. They are exactly equivariant, so
//! any matching error comes from interpolation, pixel quantization and the
//! injected Gaussian noise.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::featstore::FeatureMap;
use crate::geometry::{
    backproject, fibonacci_rig, pixel_center, project, raytrace_depth, write_atomic, Intrinsics, ObjectViews,
    OcclusionTolerance, Pixel, Primitive, RigidPose, SyntheticScene, ViewRecord,
};
use crate::manifest::{view_entry, DatasetManifest, ObjectEntry};
use crate::metrics::Track;
use crate::pose::WORKING_RESOLUTION;
use crate::rng::{mix64, SplitMix64};
use crate::semcorr::KeypointPair;
use crate::tracking::TrackQuery;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    Sphere,
    Box,
    BoxSphere,
}

impl std::str::FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Self::Sphere),
            "box" => Ok(Self::Box),
            "box-sphere" => Ok(Self::BoxSphere),
            other => Err(Error::config(format!("unknown scene '{other}', expected sphere, box or box-sphere"))),
        }
    }
}

impl SceneKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Sphere => "sphere",
            Self::Box => "box",
            Self::BoxSphere => "box-sphere",
        }
    }

    pub fn scene(&self) -> SyntheticScene {
        let prims = match self {
            Self::Sphere => vec![Primitive::Sphere {
                center: Vector3::zeros(),
                radius: 1.0,
            }],
            Self::Box => vec![Primitive::Box {
                min: Vector3::new(-0.8, -0.6, -0.5),
                max: Vector3::new(0.8, 0.6, 0.5),
            }],
            Self::BoxSphere => vec![
                Primitive::Box {
                    min: Vector3::new(-0.7, -0.6, -0.8),
                    max: Vector3::new(0.7, 0.6, 0.2),
                },
                Primitive::Sphere {
                    center: Vector3::new(0.2, -0.1, 0.6),
                    radius: 0.5,
                },
            ],
        };
        SyntheticScene::new(prims).expect("built-in scenes are valid")
    }
}

/// Random Fourier encoding of world points.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleFeatures {
    pub freqs: Vec<(Vector3<f64>, f64)>,
    /// Value of the background channel off the object.
    pub background: f64,
}

impl OracleFeatures {
    pub fn random(n_freqs: usize, scale: f64, seed: u64) -> Self {
        let mut rng = SplitMix64::stream(seed, 0x6f72_6163);
        let freqs = (0..n_freqs)
            .map(|_| {
                let w = Vector3::new(rng.normal(), rng.normal(), rng.normal()) * scale;
                (w, rng.uniform(0.0, std::f64::consts::TAU))
            })
            .collect();
        Self {
            freqs,
            background: (n_freqs.max(1) as f64).sqrt(),
        }
    }

    pub fn channels(&self) -> usize {
        2 * self.freqs.len() + 1
    }

    /// Encoding of a surface point, or of background when `None`.
    pub fn encode(&self, p: Option<&Vector3<f64>>, out: &mut [f64]) {
        out.fill(0.0);
        match p {
            Some(p) => {
                for (k, (w, phi)) in self.freqs.iter().enumerate() {
                    let t = w.dot(p) + phi;
                    out[2 * k] = t.cos();
                    out[2 * k + 1] = t.sin();
                }
            }
            None => out[2 * self.freqs.len()] = self.background,
        }
    }
}

/// Oracle feature map for one camera, sampled at patch centers, with
/// i.i.d. Gaussian noise of standard deviation `noise` per value.
pub fn oracle_feature_map(
    scene: &SyntheticScene,
    k: &Intrinsics,
    pose: &RigidPose,
    oracle: &OracleFeatures,
    patch: usize,
    noise: f64,
    rng: &mut SplitMix64,
) -> Result<FeatureMap> {
    let c = oracle.channels();
    let mut m = FeatureMap::zeros(c, patch, k.width, k.height)?;
    let origin = pose.camera_center();
    let rt = pose.rotation.transpose();
    let mut buf = vec![0.0; c];
    for r in 0..m.hf {
        for col in 0..m.wf {
            let x = Pixel::new((col as f64 + 0.5) * patch as f64, (r as f64 + 0.5) * patch as f64);
            let dir = rt * k.unproject(&x);
            let hit = scene.intersect(&origin, &dir).map(|t| origin + t * dir);
            oracle.encode(hit.as_ref(), &mut buf);
            for (o, v) in m.cell_mut(r, col).iter_mut().zip(&buf) {
                let n = if noise > 0.0 { noise * rng.normal() } else { 0.0 };
                *o = (v + n) as f32;
            }
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub scenes: Vec<SceneKind>,
    pub n_views: usize,
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    pub rig_radius: f64,
    pub features: bool,
    pub patch: usize,
    pub n_freqs: usize,
    pub freq_scale: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scenes: vec![SceneKind::Sphere],
            n_views: 42,
            width: 64,
            height: 64,
            hfov_deg: 45.0,
            rig_radius: 3.5,
            features: true,
            patch: 4,
            n_freqs: 8,
            freq_scale: 2.0,
            noise: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_views < 2 {
            return Err(Error::config("need at least 2 views"));
        }
        if self.scenes.is_empty() {
            return Err(Error::config("need at least one scene"));
        }
        if self.width == 0 || self.height == 0 || self.patch == 0 {
            return Err(Error::config("image size and patch must be positive"));
        }
        if !(self.noise >= 0.0) || !(self.rig_radius > 1.5) {
            return Err(Error::config("noise must be nonnegative and the rig must enclose the scene"));
        }
        Ok(())
    }

    pub fn oracle(&self) -> OracleFeatures {
        OracleFeatures::random(self.n_freqs, self.freq_scale, self.seed)
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::from_fov(self.width, self.height, self.hfov_deg)
    }
}

/// Rig for object `index`: the Fibonacci rig turned about world Z so
/// different objects are seen from different directions.
fn object_rig(cfg: &SynthConfig, index: usize) -> Vec<RigidPose> {
    let turn = crate::geometry::axis_angle(Vector3::z(), 17.0 * index as f64);
    fibonacci_rig(cfg.n_views, cfg.rig_radius, Vector3::zeros())
        .into_iter()
        .map(|p| RigidPose {
            rotation: p.rotation * turn.transpose(),
            translation: p.translation,
        })
        .collect()
}

pub fn object_id(index: usize, kind: SceneKind) -> String {
    format!("obj{index}-{}", kind.name())
}

/// Render every configured object in memory.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<ObjectViews>> {
    cfg.validate()?;
    let k = cfg.intrinsics()?;
    let oracle = cfg.oracle();
    cfg.scenes
        .iter()
        .enumerate()
        .map(|(oi, kind)| {
            let scene = kind.scene();
            let views = object_rig(cfg, oi)
                .iter()
                .enumerate()
                .map(|(vi, pose)| {
                    let depth = raytrace_depth(&scene, &k, pose);
                    let features = if cfg.features {
                        let mut rng = SplitMix64::stream(cfg.seed ^ mix64(oi as u64 + 1), vi as u64);
                        Some(oracle_feature_map(&scene, &k, pose, &oracle, cfg.patch, cfg.noise, &mut rng)?)
                    } else {
                        None
                    };
                    Ok(ViewRecord {
                        id: format!("v{vi:03}"),
                        intrinsics: k,
                        pose: *pose,
                        depth: Some(depth),
                        features,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ObjectViews {
                id: object_id(oi, *kind),
                views,
            })
        })
        .collect()
}

/// Write depth, features and per-view camera JSON under `out`, plus
/// `manifest.json`. Returns the manifest path.
pub fn write_dataset(objects: &[ObjectViews], out: &Path) -> Result<PathBuf> {
    for sub in ["depth", "features", "cameras"] {
        std::fs::create_dir_all(out.join(sub)).map_err(|e| Error::io(out.join(sub), e))?;
    }
    let mut entries = Vec::new();
    for o in objects {
        let mut views = Vec::new();
        for v in &o.views {
            let stem = format!("{}_{}", o.id, v.id);
            let depth = match &v.depth {
                Some(d) => {
                    let rel = format!("depth/{stem}.dpt");
                    d.save(out.join(&rel))?;
                    Some(rel)
                }
                None => None,
            };
            let features = match &v.features {
                Some(f) => {
                    let rel = format!("features/{stem}.ftb");
                    f.save(out.join(&rel))?;
                    Some(rel)
                }
                None => None,
            };
            let entry = view_entry(v, depth, features);
            let cam = serde_json::json!({
                "width": entry.width,
                "height": entry.height,
                "intrinsics": entry.intrinsics,
                "pose": entry.pose,
            });
            let cam_text = serde_json::to_string_pretty(&cam).expect("camera serializes");
            write_atomic(&out.join(format!("cameras/{stem}.json")), cam_text.as_bytes())?;
            views.push(entry);
        }
        entries.push(ObjectEntry {
            id: o.id.clone(),
            views,
        });
    }
    let manifest = DatasetManifest {
        units: Some("meters".into()),
        working_resolution: WORKING_RESOLUTION,
        objects: entries,
    };
    let path = out.join("manifest.json");
    write_atomic(&path, manifest.to_json().as_bytes())?;
    Ok(path)
}

/// A short orbit around one scene with oracle features and ground-truth
/// tracks for points picked on the first frame.
#[derive(Debug, Clone)]
pub struct TrackingFixture {
    pub frames: Vec<FeatureMap>,
    pub queries: Vec<TrackQuery>,
    pub gt: Vec<Track>,
}

pub fn tracking_fixture(cfg: &SynthConfig, n_frames: usize, step_deg: f64, n_queries: usize) -> Result<TrackingFixture> {
    cfg.validate()?;
    if n_frames == 0 {
        return Err(Error::config("need at least one frame"));
    }
    let k = cfg.intrinsics()?;
    let scene = cfg.scenes[0].scene();
    let oracle = cfg.oracle();
    let eye0 = Vector3::new(cfg.rig_radius * 0.9, 0.0, cfg.rig_radius * 0.43);
    let poses: Vec<RigidPose> = (0..n_frames)
        .map(|t| {
            let r = crate::geometry::axis_angle(Vector3::z(), step_deg * t as f64);
            RigidPose::look_at(r * eye0, Vector3::zeros(), Vector3::z())
        })
        .collect();
    let depths: Vec<_> = poses.iter().map(|p| raytrace_depth(&scene, &k, p)).collect();
    let frames = poses
        .iter()
        .enumerate()
        .map(|(t, p)| {
            let mut rng = SplitMix64::stream(cfg.seed ^ 0x7472_6163, t as u64);
            oracle_feature_map(&scene, &k, p, &oracle, cfg.patch, cfg.noise, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    let occ = OcclusionTolerance::default();
    let fg: Vec<(usize, usize)> = (0..k.height)
        .step_by(2)
        .flat_map(|r| (0..k.width).step_by(2).map(move |c| (c, r)))
        .filter(|&(c, r)| depths[0].is_valid(c, r))
        .collect();
    let mut rng = SplitMix64::stream(cfg.seed, 0x7175_6572);
    let picks = rng.sample_distinct(fg.len(), n_queries);
    let mut queries = Vec::new();
    let mut gt = Vec::new();
    for i in picks {
        let (c, r) = fg[i];
        let x0 = pixel_center(c, r);
        let p = backproject(&x0, depths[0].get(c, r), &k, &poses[0])?;
        let mut positions = Vec::with_capacity(n_frames);
        let mut visible = Vec::with_capacity(n_frames);
        for (pose, depth) in poses.iter().zip(&depths) {
            let (x, z) = project(&p, &k, pose)?;
            let vis = z > 0.0
                && k.contains(&x)
                && depth.sample_bilinear(&x).is_some_and(|d| (z - d).abs() <= occ.bound(z));
            positions.push(x);
            visible.push(vis);
        }
        queries.push(TrackQuery {
            point: [x0.x, x0.y],
            frame_index: 0,
        });
        gt.push(Track { positions, visible });
    }
    Ok(TrackingFixture { frames, queries, gt })
}

/// Keypoint pairs between consecutive views of `object`, with keypoints at
/// random ground-truth correspondences and the target foreground box.
pub fn semcorr_fixture(
    object: &ObjectViews,
    n_pairs: usize,
    kpts_per_pair: usize,
    seed: u64,
) -> Result<(Vec<KeypointPair>, HashMap<String, FeatureMap>)> {
    let n = object.views.len();
    if n < 2 {
        return Err(Error::config("semantic fixture needs two views"));
    }
    let mut rng = SplitMix64::stream(seed, 0x7365_6d63);
    let mut pairs = Vec::new();
    let mut feats = HashMap::new();
    let occ = OcclusionTolerance::default();
    for i in 0..n_pairs.min(n) {
        let (a, b) = (&object.views[i], &object.views[(i + 1) % n]);
        let gt = crate::geometry::gt_correspondences(a, b, 2, &occ)?;
        if gt.len() < kpts_per_pair {
            continue;
        }
        let picks = rng.sample_distinct(gt.len(), kpts_per_pair);
        let db = b.depth_checked()?;
        let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, 0.0f64, 0.0f64);
        for r in 0..db.height {
            for c in 0..db.width {
                if db.is_valid(c, r) {
                    x0 = x0.min(c as f64);
                    y0 = y0.min(r as f64);
                    x1 = x1.max(c as f64 + 1.0);
                    y1 = y1.max(r as f64 + 1.0);
                }
            }
        }
        let ida = format!("{}_{}", object.id, a.id);
        let idb = format!("{}_{}", object.id, b.id);
        pairs.push(KeypointPair {
            src: ida.clone(),
            dst: idb.clone(),
            src_kpts: picks.iter().map(|&j| [gt.pairs[j].x1.x, gt.pairs[j].x1.y]).collect(),
            dst_kpts: picks.iter().map(|&j| [gt.pairs[j].x2.x, gt.pairs[j].x2.y]).collect(),
            dst_bbox: Some([x0, y0, x1, y1]),
        });
        feats.insert(ida, a.features_checked()?.clone());
        feats.insert(idb, b.features_checked()?.clone());
    }
    if pairs.is_empty() {
        return Err(Error::config(format!(
            "no consecutive view pair shares {kpts_per_pair} visible points; use more views or fewer keypoints"
        )));
    }
    Ok((pairs, feats))
}

/// Write a tracking fixture as `frames/frame_NNN.ftb`, `queries.json` and
/// `gt.json` (per point, per frame `[x, y, visible]`).
pub fn write_tracking_fixture(fx: &TrackingFixture, out: &Path) -> Result<()> {
    let frames_dir = out.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    for (t, f) in fx.frames.iter().enumerate() {
        f.save(frames_dir.join(format!("frame_{t:03}.ftb")))?;
    }
    let q = serde_json::to_string_pretty(&fx.queries).expect("queries serialize");
    write_atomic(&out.join("queries.json"), q.as_bytes())?;
    let gt: Vec<Vec<[f64; 3]>> = fx
        .gt
        .iter()
        .map(|t| {
            t.positions
                .iter()
                .zip(&t.visible)
                .map(|(p, v)| [p.x, p.y, *v as u8 as f64])
                .collect()
        })
        .collect();
    let g = serde_json::to_string_pretty(&gt).expect("tracks serialize");
    write_atomic(&out.join("gt.json"), g.as_bytes())?;
    Ok(())
}

/// Write keypoint pairs to `pairs.json` and their features to
/// `features/<id>.ftb`.
pub fn write_semcorr_fixture(pairs: &[KeypointPair], feats: &HashMap<String, FeatureMap>, out: &Path) -> Result<()> {
    let dir = out.join("features");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut ids: Vec<&String> = feats.keys().collect();
    ids.sort();
    for id in ids {
        feats[id].save(dir.join(format!("{id}.ftb")))?;
    }
    let text = serde_json::to_string_pretty(pairs).expect("pairs serialize");
    write_atomic(&out.join("pairs.json"), text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featstore::sample_feature;

    #[test]
    fn oracle_features_are_equivariant() {
        let cfg = SynthConfig {
            n_views: 4,
            patch: 1,
            ..SynthConfig::default()
        };
        let objs = generate(&cfg).unwrap();
        let oracle = cfg.oracle();
        let v = &objs[0].views[1];
        let d = v.depth.as_ref().unwrap();
        let f = v.features.as_ref().unwrap();
        let mut buf = vec![0.0; oracle.channels()];
        for (c, r) in [(32, 32), (20, 40), (0, 0)] {
            let x = pixel_center(c, r);
            let want = if d.is_valid(c, r) {
                Some(backproject(&x, d.get(c, r), &v.intrinsics, &v.pose).unwrap())
            } else {
                None
            };
            oracle.encode(want.as_ref(), &mut buf);
            let got = sample_feature(f, &x, false).unwrap();
            for (a, b) in got.0.iter().zip(&buf) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn view_count_and_ids() {
        let cfg = SynthConfig {
            scenes: vec![SceneKind::Sphere, SceneKind::BoxSphere],
            n_views: 5,
            features: false,
            ..SynthConfig::default()
        };
        let objs = generate(&cfg).unwrap();
        assert_eq!(objs.len(), 2);
        assert_eq!(objs[1].id, "obj1-box-sphere");
        assert!(objs.iter().all(|o| o.views.len() == 5 && o.views[0].features.is_none()));
        assert!(SynthConfig {
            n_views: 1,
            ..SynthConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn tracking_fixture_starts_at_queries() {
        let cfg = SynthConfig::default();
        let fx = tracking_fixture(&cfg, 3, 2.0, 6).unwrap();
        assert_eq!(fx.frames.len(), 3);
        assert_eq!(fx.queries.len(), 6);
        for (q, g) in fx.queries.iter().zip(&fx.gt) {
            assert!((g.positions[0] - Pixel::new(q.point[0], q.point[1])).norm() < 1e-9);
            assert!(g.visible[0]);
        }
    }
}
