//! Scalar evaluation metrics. All percentages are in `[0, 100]`, sums are
//! accumulated in f64 in index order so results are reproducible bit-for-bit.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_error_deg, CorrespondenceSet, Pixel, RigidPose};
use crate::matching::MatchResult;

pub const PCDP_DELTAS: [f64; 3] = [0.05, 0.10, 0.20];
pub const PCK_ALPHAS: [f64; 3] = [0.05, 0.10, 0.15];
pub const POSE_THRESHOLDS: [(f64, f64); 3] = [(1.0, 1.0), (3.0, 3.0), (5.0, 5.0)];
pub const TRACKING_THRESHOLDS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];

/// Key used for threshold maps in reports, e.g. `0.05` -> `"0.05"`.
pub fn threshold_key(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceReport {
    pub ape_percent: f64,
    pub pcdp: BTreeMap<String, f64>,
    pub pair_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseAccuracyReport {
    /// `"1cm-1deg"` style keys.
    pub acc: BTreeMap<String, f64>,
    pub n_frames: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingReport {
    pub aj: f64,
    pub delta_avg: f64,
    pub oa: f64,
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::config(format!("{what}: {a} ground-truth items but {b} predictions")));
    }
    Ok(())
}

fn normalized_errors<'a>(
    gt: &'a CorrespondenceSet,
    pred: &'a [MatchResult],
) -> impl Iterator<Item = f64> + 'a {
    let side = gt.min_side() as f64;
    gt.pairs
        .iter()
        .zip(pred)
        .map(move |(g, p)| (g.x2 - p.position).norm() / side)
}

/// Average pixel error, percent of the shorter image side.
pub fn ape(gt: &CorrespondenceSet, pred: &[MatchResult]) -> Result<f64> {
    check_len(gt.pairs.len(), pred.len(), "ape")?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = normalized_errors(gt, pred).sum();
    Ok(100.0 * sum / pred.len() as f64)
}

/// Percentage of predictions with normalized error strictly below `delta`.
pub fn pcdp(gt: &CorrespondenceSet, pred: &[MatchResult], delta: f64) -> Result<f64> {
    check_len(gt.pairs.len(), pred.len(), "pcdp")?;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::config(format!("pcdp delta {delta} must lie in (0, 1)")));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let hits = normalized_errors(gt, pred).filter(|&e| e < delta).count();
    Ok(100.0 * hits as f64 / pred.len() as f64)
}

/// Running APE/PCDP totals over many view pairs.
#[derive(Debug, Clone, Default)]
pub struct EquivarianceAccumulator {
    err_sum: f64,
    hits: [usize; 3],
    count: usize,
    pairs: usize,
}

impl EquivarianceAccumulator {
    pub fn add(&mut self, gt: &CorrespondenceSet, pred: &[MatchResult]) -> Result<()> {
        check_len(gt.pairs.len(), pred.len(), "equivariance")?;
        for e in normalized_errors(gt, pred) {
            self.err_sum += e;
            for (h, d) in self.hits.iter_mut().zip(PCDP_DELTAS) {
                if e < d {
                    *h += 1;
                }
            }
        }
        self.count += pred.len();
        self.pairs += 1;
        Ok(())
    }

    pub fn correspondences(&self) -> usize {
        self.count
    }

    pub fn report(&self) -> EquivarianceReport {
        let n = self.count.max(1) as f64;
        EquivarianceReport {
            ape_percent: 100.0 * self.err_sum / n,
            pcdp: PCDP_DELTAS
                .iter()
                .zip(self.hits)
                .map(|(d, h)| (threshold_key(*d), 100.0 * h as f64 / n))
                .collect(),
            pair_count: self.pairs,
        }
    }
}

/// Percentage of keypoints within `alpha * norm_len` (inclusive).
pub fn pck(gt: &[Pixel], pred: &[Pixel], norm_len: f64, alpha: f64) -> Result<f64> {
    check_len(gt.len(), pred.len(), "pck")?;
    if !(norm_len > 0.0) {
        return Err(Error::config(format!("pck normalization length {norm_len} must be positive")));
    }
    if gt.is_empty() {
        return Ok(0.0);
    }
    let hits = gt
        .iter()
        .zip(pred)
        .filter(|(g, p)| (*g - *p).norm() <= alpha * norm_len)
        .count();
    Ok(100.0 * hits as f64 / gt.len() as f64)
}

/// Units of pose translations; only meters are accepted so the centimeter
/// thresholds are well defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneUnits {
    Meters,
}

impl SceneUnits {
    pub fn parse(s: Option<&str>) -> Result<Self> {
        match s {
            Some("meters") | Some("m") => Ok(SceneUnits::Meters),
            Some(other) => Err(Error::config(format!("unsupported scene units {other:?}"))),
            None => Err(Error::config("scene units must be declared (\"meters\")")),
        }
    }
}

pub fn pose_key(cm: f64, deg: f64) -> String {
    format!("{cm}cm-{deg}deg")
}

/// Per-frame translation error (cm) and rotation error (deg); `None` marks a
/// failed frame, which counts as wrong at every threshold.
pub fn pose_errors(est: &RigidPose, gt: &RigidPose, units: SceneUnits) -> Result<(f64, f64)> {
    let SceneUnits::Meters = units;
    let dt: Vector3<f64> = est.translation - gt.translation;
    Ok((dt.norm() * 100.0, rotation_error_deg(&est.rotation, &gt.rotation)?))
}

pub fn pose_accuracy_from_errors(errors: &[Option<(f64, f64)>]) -> PoseAccuracyReport {
    let n = errors.len();
    let acc = POSE_THRESHOLDS
        .iter()
        .map(|&(cm, deg)| {
            let ok = errors
                .iter()
                .filter(|e| matches!(e, Some((t, r)) if *t <= cm && *r <= deg))
                .count();
            let pct = if n == 0 { 0.0 } else { 100.0 * ok as f64 / n as f64 };
            (pose_key(cm, deg), pct)
        })
        .collect();
    PoseAccuracyReport { acc, n_frames: n }
}

/// Fraction of frames correct at the 1/3/5 cm-deg thresholds. `units` must
/// be declared; a frame counts only if both errors are within the threshold.
pub fn pose_accuracy(
    est: &[Option<RigidPose>],
    gt: &[RigidPose],
    units: Option<SceneUnits>,
) -> Result<PoseAccuracyReport> {
    let units = units.ok_or_else(|| Error::config("pose accuracy needs declared scene units"))?;
    check_len(gt.len(), est.len(), "pose accuracy")?;
    let errors = est
        .iter()
        .zip(gt)
        .map(|(e, g)| e.as_ref().map(|e| pose_errors(e, g, units)).transpose())
        .collect::<Result<Vec<_>>>()?;
    Ok(pose_accuracy_from_errors(&errors))
}

/// One point track: per-frame position and visibility.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub positions: Vec<Pixel>,
    pub visible: Vec<bool>,
}

/// Threshold-averaged Jaccard, position accuracy and occlusion accuracy.
/// Positions must already be at the evaluation resolution.
pub fn tracking_metrics(pred: &[Track], gt: &[Track]) -> Result<TrackingReport> {
    check_len(gt.len(), pred.len(), "tracking points")?;
    for (p, g) in pred.iter().zip(gt) {
        let n = g.positions.len();
        if g.visible.len() != n || p.positions.len() != n || p.visible.len() != n {
            return Err(Error::config("tracking: per-frame lengths differ"));
        }
    }
    let mut occ_correct = 0usize;
    let mut total = 0usize;
    let mut gt_visible = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        for (pv, gv) in p.visible.iter().zip(&g.visible) {
            occ_correct += (pv == gv) as usize;
            gt_visible += *gv as usize;
            total += 1;
        }
    }
    let mut jac_sum = 0.0;
    let mut acc_sum = 0.0;
    for thr in TRACKING_THRESHOLDS {
        let (mut tp, mut fp, mut fn_, mut within_vis) = (0usize, 0usize, 0usize, 0usize);
        for (p, g) in pred.iter().zip(gt) {
            for f in 0..g.positions.len() {
                let within = (p.positions[f] - g.positions[f]).norm() < thr;
                let (pv, gv) = (p.visible[f], g.visible[f]);
                if gv && within {
                    within_vis += 1;
                }
                if pv && gv && within {
                    tp += 1;
                }
                if pv && (!gv || !within) {
                    fp += 1;
                }
                if gv && (!pv || !within) {
                    fn_ += 1;
                }
            }
        }
        let denom = tp + fp + fn_;
        jac_sum += if denom == 0 { 1.0 } else { tp as f64 / denom as f64 };
        acc_sum += if gt_visible == 0 { 1.0 } else { within_vis as f64 / gt_visible as f64 };
    }
    let k = TRACKING_THRESHOLDS.len() as f64;
    Ok(TrackingReport {
        aj: 100.0 * jac_sum / k,
        delta_avg: 100.0 * acc_sum / k,
        oa: if total == 0 { 100.0 } else { 100.0 * occ_correct as f64 / total as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{axis_angle, Correspondence};

    fn set(pairs: Vec<(Pixel, Pixel)>, w: usize, h: usize) -> CorrespondenceSet {
        CorrespondenceSet {
            view_a: "a".into(),
            view_b: "b".into(),
            pairs: pairs.into_iter().map(|(x1, x2)| Correspondence { x1, x2 }).collect(),
            image_w: w,
            image_h: h,
            rejected: 0,
        }
    }

    fn pred(p: Pixel) -> MatchResult {
        MatchResult {
            position: p,
            col: 0,
            row: 0,
            score: 1.0,
        }
    }

    #[test]
    fn threshold_keys() {
        assert_eq!(threshold_key(0.05), "0.05");
        assert_eq!(threshold_key(0.10), "0.1");
        assert_eq!(threshold_key(0.2), "0.2");
        assert_eq!(pose_key(3.0, 3.0), "3cm-3deg");
    }

    #[test]
    fn ape_and_pcdp_examples() {
        let gt = set(
            (0..10).map(|i| (Pixel::new(1.0, 1.0), Pixel::new(i as f64 + 20.0, 30.0))).collect(),
            200,
            100,
        );
        let perfect: Vec<_> = gt.pairs.iter().map(|c| pred(c.x2)).collect();
        assert_eq!(ape(&gt, &perfect).unwrap(), 0.0);
        assert_eq!(pcdp(&gt, &perfect, 0.05).unwrap(), 100.0);

        // Every prediction off by min(W, H) / 10.
        let off: Vec<_> = gt.pairs.iter().map(|c| pred(c.x2 + Pixel::new(6.0, 8.0))).collect();
        assert!((ape(&gt, &off).unwrap() - 10.0).abs() < 1e-12);

        // Exactly at the boundary counts as a miss.
        let at: Vec<_> = gt.pairs.iter().map(|c| pred(c.x2 + Pixel::new(0.0, 5.0))).collect();
        assert_eq!(pcdp(&gt, &at, 0.05).unwrap(), 0.0);

        // 7 inside, 3 outside.
        let mixed: Vec<_> = gt
            .pairs
            .iter()
            .enumerate()
            .map(|(i, c)| pred(c.x2 + Pixel::new(if i < 7 { 1.0 } else { 30.0 }, 0.0)))
            .collect();
        assert!((pcdp(&gt, &mixed, 0.05).unwrap() - 70.0).abs() < 1e-12);

        assert!(ape(&gt, &mixed[..3]).is_err());
        assert!(pcdp(&gt, &mixed, 0.0).is_err());
    }

    #[test]
    fn pck_examples() {
        let gt = vec![Pixel::new(10.0, 10.0); 4];
        let pred: Vec<_> = [0.0, 0.04, 0.09, 0.2]
            .iter()
            .map(|e| Pixel::new(10.0 + e * 100.0, 10.0))
            .collect();
        assert!((pck(&gt, &pred, 100.0, 0.05).unwrap() - 50.0).abs() < 1e-12);
        assert_eq!(pck(&gt, &gt, 100.0, 0.05).unwrap(), 100.0);
        assert!(pck(&gt, &pred[..2], 100.0, 0.05).is_err());
        assert!(pck(&gt, &pred, 0.0, 0.05).is_err());
    }

    #[test]
    fn pose_accuracy_thresholds() {
        let gt = RigidPose::identity();
        let mut shifted = gt;
        shifted.translation.x = 0.02;
        let r = pose_accuracy(&[Some(gt), Some(shifted)], &[gt, gt], Some(SceneUnits::Meters)).unwrap();
        assert_eq!(r.acc["1cm-1deg"], 50.0);
        assert_eq!(r.acc["3cm-3deg"], 100.0);
        assert_eq!(r.acc["5cm-5deg"], 100.0);
        assert!(pose_accuracy(&[Some(gt)], &[gt], None).is_err());
        assert!(SceneUnits::parse(Some("feet")).is_err());

        let mut rot = gt;
        rot.rotation = axis_angle(Vector3::y(), 2.0);
        let r = pose_accuracy(&[Some(rot), None], &[gt, gt], Some(SceneUnits::Meters)).unwrap();
        assert_eq!(r.acc["1cm-1deg"], 0.0);
        assert_eq!(r.acc["3cm-3deg"], 50.0);
    }

    #[test]
    fn tracking_extremes() {
        let gt = vec![Track {
            positions: vec![Pixel::new(5.0, 5.0), Pixel::new(6.0, 5.0)],
            visible: vec![true, true],
        }];
        let r = tracking_metrics(&gt, &gt).unwrap();
        assert_eq!((r.aj, r.delta_avg, r.oa), (100.0, 100.0, 100.0));
        let occluded = vec![Track {
            positions: gt[0].positions.clone(),
            visible: vec![false, false],
        }];
        let r = tracking_metrics(&occluded, &gt).unwrap();
        assert_eq!((r.aj, r.oa), (0.0, 0.0));
    }
}
