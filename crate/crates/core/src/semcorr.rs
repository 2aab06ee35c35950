//! Semantic keypoint transfer by nearest cosine neighbor, scored with PCK.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featstore::{sample_feature, FeatureMap};
use crate::geometry::Pixel;
use crate::matching::{CandidateGrid, Matcher};
use crate::metrics::{threshold_key, PCK_ALPHAS};

/// One entry of the pair manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointPair {
    pub src: String,
    pub dst: String,
    pub src_kpts: Vec<[f64; 2]>,
    pub dst_kpts: Vec<[f64; 2]>,
    /// `[x0, y0, x1, y1]` of the object in the destination image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst_bbox: Option<[f64; 4]>,
}

impl KeypointPair {
    pub fn validate(&self) -> Result<()> {
        if self.src_kpts.len() != self.dst_kpts.len() {
            return Err(Error::config(format!(
                "pair {} -> {}: {} source keypoints, {} target keypoints",
                self.src,
                self.dst,
                self.src_kpts.len(),
                self.dst_kpts.len()
            )));
        }
        if let Some([x0, y0, x1, y1]) = self.dst_bbox {
            if !(x1 > x0 && y1 > y0) {
                return Err(Error::config(format!("pair {} -> {}: empty bounding box", self.src, self.dst)));
            }
        }
        Ok(())
    }
}

/// Best-match location in `dst` for each source keypoint; `None` for
/// keypoints outside the source image or with degenerate features.
pub fn transfer_keypoints(
    src: &FeatureMap,
    dst: &FeatureMap,
    kpts: &[Pixel],
    grid: &CandidateGrid,
) -> Result<Vec<Option<Pixel>>> {
    if src.channels != dst.channels {
        return Err(Error::config(format!(
            "channel mismatch: {} vs {}",
            src.channels, dst.channels
        )));
    }
    grid.validate(dst.img_w, dst.img_h)?;
    let m = Matcher::new(dst);
    kpts.iter()
        .map(|k| {
            if !(k.x >= 0.0 && k.y >= 0.0 && k.x < src.img_w as f64 && k.y < src.img_h as f64) {
                return Ok(None);
            }
            let Ok(q) = sample_feature(src, k, true) else { return Ok(None) };
            match m.best(&q, grid) {
                Ok(r) => Ok(Some(r.position)),
                Err(Error::NoCandidates) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// PCK tables keyed by alpha (`"0.05"`, ...), in percent.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SemcorrReport {
    /// Headline: keypoint-averaged, normalized by the target bounding box.
    pub pck: BTreeMap<String, f64>,
    pub pck_image: BTreeMap<String, f64>,
    pub pck_macro: BTreeMap<String, f64>,
    pub pck_image_macro: BTreeMap<String, f64>,
    pub keypoints: usize,
    pub pairs: usize,
    pub skipped_keypoints: usize,
    pub excluded_pairs: Vec<String>,
}

struct PairCounts {
    n: usize,
    skipped: usize,
    bbox_hits: Vec<usize>,
    image_hits: Vec<usize>,
}

fn pair_counts(pair: &KeypointPair, src: &FeatureMap, dst: &FeatureMap, grid: &CandidateGrid, alphas: &[f64]) -> Result<PairCounts> {
    pair.validate()?;
    let kp: Vec<Pixel> = pair.src_kpts.iter().map(|k| Pixel::new(k[0], k[1])).collect();
    let pred = transfer_keypoints(src, dst, &kp, grid)?;
    let image_len = dst.img_w.min(dst.img_h) as f64;
    let bbox_len = match pair.dst_bbox {
        Some([x0, y0, x1, y1]) => (x1 - x0).max(y1 - y0),
        None => image_len,
    };
    let mut c = PairCounts {
        n: 0,
        skipped: 0,
        bbox_hits: vec![0; alphas.len()],
        image_hits: vec![0; alphas.len()],
    };
    for (p, g) in pred.iter().zip(&pair.dst_kpts) {
        c.n += 1;
        let Some(p) = p else {
            // A keypoint we could not transfer counts as a miss.
            c.skipped += 1;
            continue;
        };
        let err = (p - Pixel::new(g[0], g[1])).norm();
        for (k, a) in alphas.iter().enumerate() {
            c.bbox_hits[k] += (err <= a * bbox_len) as usize;
            c.image_hits[k] += (err <= a * image_len) as usize;
        }
    }
    Ok(c)
}

/// Transfer and score every pair. Pairs whose features are missing are
/// excluded and listed; other errors abort.
pub fn evaluate_semcorr(
    pairs: &[KeypointPair],
    feats: &HashMap<String, FeatureMap>,
    grid: &CandidateGrid,
) -> Result<SemcorrReport> {
    evaluate_semcorr_at(pairs, feats, grid, &PCK_ALPHAS)
}

pub fn evaluate_semcorr_at(
    pairs: &[KeypointPair],
    feats: &HashMap<String, FeatureMap>,
    grid: &CandidateGrid,
    alphas: &[f64],
) -> Result<SemcorrReport> {
    let per_pair: Vec<std::result::Result<PairCounts, String>> = pairs
        .par_iter()
        .map(|p| {
            let (Some(s), Some(d)) = (feats.get(&p.src), feats.get(&p.dst)) else {
                return Ok(Err(format!("{} -> {}: missing features", p.src, p.dst)));
            };
            pair_counts(p, s, d, grid, alphas).map(Ok)
        })
        .collect::<Result<_>>()?;

    let mut report = SemcorrReport::default();
    let mut bbox = vec![0usize; alphas.len()];
    let mut image = vec![0usize; alphas.len()];
    let mut bbox_macro = vec![0.0; alphas.len()];
    let mut image_macro = vec![0.0; alphas.len()];
    let mut macro_pairs = 0usize;
    for r in per_pair {
        match r {
            Err(msg) => report.excluded_pairs.push(msg),
            Ok(c) => {
                report.pairs += 1;
                report.keypoints += c.n;
                report.skipped_keypoints += c.skipped;
                for k in 0..alphas.len() {
                    bbox[k] += c.bbox_hits[k];
                    image[k] += c.image_hits[k];
                }
                if c.n > 0 {
                    macro_pairs += 1;
                    for k in 0..alphas.len() {
                        bbox_macro[k] += 100.0 * c.bbox_hits[k] as f64 / c.n as f64;
                        image_macro[k] += 100.0 * c.image_hits[k] as f64 / c.n as f64;
                    }
                }
            }
        }
    }
    let pct = |h: usize| if report.keypoints == 0 { 0.0 } else { 100.0 * h as f64 / report.keypoints as f64 };
    let avg = |s: f64| if macro_pairs == 0 { 0.0 } else { s / macro_pairs as f64 };
    for (k, &a) in alphas.iter().enumerate() {
        let key = threshold_key(a);
        report.pck.insert(key.clone(), pct(bbox[k]));
        report.pck_image.insert(key.clone(), pct(image[k]));
        report.pck_macro.insert(key.clone(), avg(bbox_macro[k]));
        report.pck_image_macro.insert(key, avg(image_macro[k]));
    }
    Ok(report)
}

pub fn load_pairs(path: impl AsRef<std::path::Path>) -> Result<Vec<KeypointPair>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let pairs: Vec<KeypointPair> = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    for p in &pairs {
        p.validate()?;
    }
    Ok(pairs)
}
