//! Dataset manifests: JSON descriptions of posed views with paths to DPT1
//! depth and FTB1 feature files, resolved relative to the manifest.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featstore::load_feature_map;
use crate::geometry::{DepthMap, Intrinsics, ObjectViews, RigidPose, ViewRecord};
use crate::metrics::SceneUnits;
use crate::pose::WORKING_RESOLUTION;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicsEntry {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// World-to-camera pose; `rotation` is row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEntry {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl PoseEntry {
    pub fn from_pose(p: &RigidPose) -> Self {
        let r = &p.rotation;
        Self {
            rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }

    pub fn to_pose(&self) -> Result<RigidPose> {
        let r = &self.rotation;
        let m = Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        );
        RigidPose::new(m, Vector3::from(self.translation))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub intrinsics: IntrinsicsEntry,
    pub pose: PoseEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub id: String,
    pub views: Vec<ViewEntry>,
}

fn default_working_resolution() -> f64 {
    WORKING_RESOLUTION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub units: Option<String>,
    #[serde(default = "default_working_resolution")]
    pub working_resolution: f64,
    pub objects: Vec<ObjectEntry>,
}

/// What to read from disk when materializing views.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    pub depth: bool,
    pub features: bool,
}

impl LoadOptions {
    pub const ALL: Self = Self {
        depth: true,
        features: true,
    };
}

#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub manifest: DatasetManifest,
    pub base: PathBuf,
}

impl DatasetManifest {
    pub fn units(&self) -> Result<SceneUnits> {
        SceneUnits::parse(self.units.as_deref())
    }

    pub fn validate(&self) -> Result<()> {
        self.units()?;
        if !(self.working_resolution > 0.0) {
            return Err(Error::config("working_resolution must be positive"));
        }
        let mut seen = std::collections::HashSet::new();
        for o in &self.objects {
            for v in &o.views {
                if !seen.insert((o.id.as_str(), v.id.as_str())) {
                    return Err(Error::config(format!("duplicate view {} in object {}", v.id, o.id)));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<LoadedManifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        manifest.validate()?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let loaded = LoadedManifest { manifest, base };
        let missing = loaded.missing_files();
        if !missing.is_empty() {
            return Err(Error::config(format!("manifest references missing files: {}", missing.join(", "))));
        }
        Ok(loaded)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

impl LoadedManifest {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base.join(rel)
    }

    fn missing_files(&self) -> Vec<String> {
        let mut out = Vec::new();
        for o in &self.manifest.objects {
            for v in &o.views {
                for p in [&v.depth, &v.features].into_iter().flatten() {
                    if !self.resolve(p).is_file() {
                        out.push(format!("{}/{}: {p}", o.id, v.id));
                    }
                }
            }
        }
        out
    }

    /// Materialize every object, reading the requested files. Views lacking a
    /// requested file are reported together in one error.
    pub fn objects(&self, opts: LoadOptions) -> Result<Vec<ObjectViews>> {
        let mut missing = Vec::new();
        for o in &self.manifest.objects {
            for v in &o.views {
                if opts.features && v.features.is_none() {
                    missing.push(format!("{}/{} has no features", o.id, v.id));
                }
                if opts.depth && v.depth.is_none() {
                    missing.push(format!("{}/{} has no depth", o.id, v.id));
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::config(missing.join("; ")));
        }
        self.manifest
            .objects
            .iter()
            .map(|o| {
                let views = o
                    .views
                    .iter()
                    .map(|v| self.view(v, opts))
                    .collect::<Result<Vec<_>>>()?;
                Ok(ObjectViews {
                    id: o.id.clone(),
                    views,
                })
            })
            .collect()
    }

    fn view(&self, v: &ViewEntry, opts: LoadOptions) -> Result<ViewRecord> {
        let i = &v.intrinsics;
        let intrinsics = Intrinsics::new(i.fx, i.fy, i.cx, i.cy, v.width, v.height)?;
        let pose = v.pose.to_pose()?;
        let depth = match (&v.depth, opts.depth) {
            (Some(p), true) => Some(DepthMap::load(self.resolve(p))?),
            _ => None,
        };
        let features = match (&v.features, opts.features) {
            (Some(p), true) => {
                let f = load_feature_map(self.resolve(p))?;
                if f.img_w != v.width || f.img_h != v.height {
                    return Err(Error::config(format!(
                        "view {}: features are for a {}x{} image, view is {}x{}",
                        v.id, f.img_w, f.img_h, v.width, v.height
                    )));
                }
                Some(f)
            }
            _ => None,
        };
        let rec = ViewRecord {
            id: v.id.clone(),
            intrinsics,
            pose,
            depth,
            features,
        };
        if rec.depth.is_some() {
            rec.depth_checked()?;
        }
        Ok(rec)
    }
}

/// Manifest entry for an in-memory view with the given relative file paths.
pub fn view_entry(v: &ViewRecord, depth: Option<String>, features: Option<String>) -> ViewEntry {
    let k = &v.intrinsics;
    ViewEntry {
        id: v.id.clone(),
        width: k.width,
        height: k.height,
        intrinsics: IntrinsicsEntry {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
        },
        pose: PoseEntry::from_pose(&v.pose),
        depth,
        features,
    }
}
