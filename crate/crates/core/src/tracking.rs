//! Point tracking by feature similarity: a fixed reference feature per query,
//! a per-frame argmax and a softmax-weighted refinement around it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featstore::{sample_feature, FeatureMap};
use crate::geometry::{pixel_center, Pixel};
use crate::matching::{CandidateGrid, Matcher};
use crate::metrics::{tracking_metrics, Track, TrackingReport};

/// Side length, in pixels, of the square frame that tracking metrics use.
pub const EVAL_SIZE: f64 = 256.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackQuery {
    pub point: [f64; 2],
    pub frame_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackResult {
    pub positions: Vec<Pixel>,
    pub visible: Vec<bool>,
    /// Cosine of the argmax candidate per frame.
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackConfig {
    /// Softmax window radius in pixels.
    pub refine_radius: usize,
    pub temperature: f64,
    pub occ_threshold: f64,
    /// Restrict each frame's search to this many pixels around the previous
    /// frame's prediction. Off by default: every frame is searched globally.
    pub search_window: Option<f64>,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            refine_radius: 3,
            temperature: 0.05,
            occ_threshold: 0.55,
            search_window: None,
        }
    }
}

fn check_frames(frames: &[FeatureMap]) -> Result<()> {
    let first = frames.first().ok_or_else(|| Error::config("no frames to track through"))?;
    for (t, f) in frames.iter().enumerate() {
        if f.channels != first.channels {
            return Err(Error::config(format!(
                "frame {t} has {} channels, frame 0 has {}",
                f.channels, first.channels
            )));
        }
        if f.img_w != first.img_w || f.img_h != first.img_h {
            return Err(Error::config(format!("frame {t} image size differs from frame 0")));
        }
    }
    Ok(())
}

fn window_grid(w: usize, h: usize, center: &Pixel, radius: f64) -> CandidateGrid {
    let valid = (0..h)
        .flat_map(|r| (0..w).map(move |c| (c, r)))
        .map(|(c, r)| (pixel_center(c, r) - center).norm() <= radius)
        .collect();
    CandidateGrid {
        stride: 1,
        mask: Some(crate::matching::PixelMask {
            width: w,
            height: h,
            valid,
        }),
    }
}

/// Track every query through all frames. Queries are independent, so the
/// output for one query does not depend on the others or on their order.
pub fn track(frames: &[FeatureMap], queries: &[TrackQuery], cfg: &TrackConfig) -> Result<Vec<TrackResult>> {
    check_frames(frames)?;
    if !(cfg.temperature > 0.0) || cfg.refine_radius == 0 {
        return Err(Error::config("tracking needs a positive temperature and refine radius"));
    }
    let (w, h) = (frames[0].img_w, frames[0].img_h);
    let matchers: Vec<Matcher> = frames.iter().map(Matcher::new).collect();
    let full = CandidateGrid::full(1);
    queries
        .par_iter()
        .map(|q| {
            let start = Pixel::new(q.point[0], q.point[1]);
            let reference = frames.get(q.frame_index).ok_or_else(|| {
                Error::config(format!("query frame {} out of range ({} frames)", q.frame_index, frames.len()))
            })?;
            let feat = sample_feature(reference, &start, true)?;
            let n = frames.len();
            let mut positions = vec![start; n];
            let mut visible = vec![false; n];
            let mut scores = vec![0.0; n];
            // Walk outward from the reference so a search window can follow
            // the previous prediction.
            let forward = (q.frame_index..n).collect::<Vec<_>>();
            let backward = (0..q.frame_index).rev().collect::<Vec<_>>();
            for seq in [forward, backward] {
                let mut prior = start;
                for t in seq {
                    let m = &matchers[t];
                    let grid = match cfg.search_window {
                        Some(r) => window_grid(w, h, &prior, r),
                        None => full.clone(),
                    };
                    let coarse = match m.best(&feat, &grid) {
                        Ok(c) => c,
                        Err(Error::NoCandidates) => {
                            positions[t] = prior;
                            continue;
                        }
                        Err(e) => return Err(e),
                    };
                    let qs = m.query(&feat)?;
                    let x = m.refine_softmax(&qs, &coarse.position, cfg.refine_radius, cfg.temperature)?;
                    positions[t] = x;
                    scores[t] = coarse.score;
                    visible[t] = coarse.score >= cfg.occ_threshold;
                    prior = x;
                }
            }
            Ok(TrackResult {
                positions,
                visible,
                scores,
            })
        })
        .collect()
}

/// Re-threshold visibility from stored scores without re-tracking.
pub fn apply_occ_threshold(results: &mut [TrackResult], threshold: f64) {
    for r in results {
        for (v, s) in r.visible.iter_mut().zip(&r.scores) {
            *v = *s >= threshold;
        }
    }
}

fn rescale(p: &Pixel, w: usize, h: usize, eval: f64) -> Pixel {
    Pixel::new(p.x * eval / w as f64, p.y * eval / h as f64)
}

/// Rescale predictions and ground truth from `w x h` to the evaluation frame
/// and compute AJ, position accuracy and occlusion accuracy.
pub fn evaluate_tracking(pred: &[TrackResult], gt: &[Track], w: usize, h: usize) -> Result<TrackingReport> {
    evaluate_tracking_at(pred, gt, w, h, EVAL_SIZE)
}

pub fn evaluate_tracking_at(
    pred: &[TrackResult],
    gt: &[Track],
    w: usize,
    h: usize,
    eval_size: f64,
) -> Result<TrackingReport> {
    if w == 0 || h == 0 {
        return Err(Error::config("image size must be nonzero"));
    }
    let p: Vec<Track> = pred
        .iter()
        .map(|r| Track {
            positions: r.positions.iter().map(|x| rescale(x, w, h, eval_size)).collect(),
            visible: r.visible.clone(),
        })
        .collect();
    let g: Vec<Track> = gt
        .iter()
        .map(|t| Track {
            positions: t.positions.iter().map(|x| rescale(x, w, h, eval_size)).collect(),
            visible: t.visible.clone(),
        })
        .collect();
    tracking_metrics(&p, &g)
}

/// Sweep candidate thresholds and return the one with the highest occlusion
/// accuracy on the labeled tracks (lowest threshold on ties) with its OA.
pub fn calibrate_occ_threshold(pred: &[TrackResult], gt: &[Track], candidates: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::config("calibration: prediction and ground-truth counts differ"));
    }
    let mut best: Option<(f64, f64)> = None;
    let mut sorted = candidates.to_vec();
    sorted.sort_by(f64::total_cmp);
    for &thr in &sorted {
        let (mut ok, mut total) = (0usize, 0usize);
        for (p, g) in pred.iter().zip(gt) {
            if p.scores.len() != g.visible.len() {
                return Err(Error::config("calibration: per-frame lengths differ"));
            }
            for (s, v) in p.scores.iter().zip(&g.visible) {
                ok += ((*s >= thr) == *v) as usize;
                total += 1;
            }
        }
        let oa = if total == 0 { 100.0 } else { 100.0 * ok as f64 / total as f64 };
        if best.is_none_or(|b| oa > b.1) {
            best = Some((thr, oa));
        }
    }
    best.ok_or_else(|| Error::config("no candidate thresholds"))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Smooth per-pixel features `f(x - shift, y)` at patch size 1.
    fn fourier_frame(w: usize, h: usize, shift: f64) -> FeatureMap {
        let freqs = [(0.31, 0.17, 0.3), (-0.23, 0.29, 1.1), (0.11, -0.37, 2.0), (0.41, 0.05, -0.7)];
        let mut data = Vec::with_capacity(w * h * 2 * freqs.len());
        for r in 0..h {
            for c in 0..w {
                let (x, y) = (c as f64 + 0.5 - shift, r as f64 + 0.5);
                for (a, b, ph) in freqs {
                    let t: f64 = a * x + b * y + ph;
                    data.push(t.cos() as f32);
                    data.push(t.sin() as f32);
                }
            }
        }
        FeatureMap::new(2 * freqs.len(), 1, w, h, data).unwrap()
    }

    #[test]
    fn static_sequence_stays_put() {
        let f = fourier_frame(24, 20, 0.0);
        let frames = vec![f.clone(), f.clone(), f];
        let qs = [
            TrackQuery {
                point: [5.5, 7.5],
                frame_index: 0,
            },
            TrackQuery {
                point: [12.5, 3.5],
                frame_index: 1,
            },
        ];
        let res = track(&frames, &qs, &TrackConfig::default()).unwrap();
        for (q, r) in qs.iter().zip(&res) {
            for (p, v) in r.positions.iter().zip(&r.visible) {
                assert!((p - Pixel::new(q.point[0], q.point[1])).norm() < 1e-6, "{p:?}");
                assert!(*v);
            }
        }
    }

    #[test]
    fn shifted_sequence_advances_one_pixel_per_frame() {
        let frames: Vec<FeatureMap> = (0..6).map(|t| fourier_frame(32, 20, t as f64)).collect();
        let q = TrackQuery {
            point: [8.5, 9.5],
            frame_index: 0,
        };
        let res = track(&frames, &[q], &TrackConfig::default()).unwrap();
        for (t, p) in res[0].positions.iter().enumerate() {
            assert!((p.x - (8.5 + t as f64)).abs() < 0.5, "frame {t}: {p:?}");
            assert!((p.y - 9.5).abs() < 0.5);
        }
    }

    #[test]
    fn orthogonal_frame_is_occluded() {
        let a = FeatureMap::new(2, 1, 4, 4, [1.0f32, 0.0].repeat(16)).unwrap();
        let b = FeatureMap::new(2, 1, 4, 4, [0.0f32, 1.0].repeat(16)).unwrap();
        let q = TrackQuery {
            point: [1.5, 1.5],
            frame_index: 0,
        };
        let res = track(&[a, b], &[q], &TrackConfig::default()).unwrap();
        assert_eq!(res[0].visible, vec![true, false]);
    }

    #[test]
    fn lowering_threshold_never_hides_points() {
        let frames: Vec<FeatureMap> = (0..4).map(|t| fourier_frame(16, 16, 2.0 * t as f64)).collect();
        let qs: Vec<TrackQuery> = (0..5)
            .map(|i| TrackQuery {
                point: [2.5 + 2.0 * i as f64, 6.5],
                frame_index: 0,
            })
            .collect();
        let mut res = track(&frames, &qs, &TrackConfig::default()).unwrap();
        let mut last = 0;
        for thr in [0.99, 0.9, 0.5, 0.0, -1.0] {
            apply_occ_threshold(&mut res, thr);
            let n: usize = res.iter().map(|r| r.visible.iter().filter(|&&v| v).count()).sum();
            assert!(n >= last);
            last = n;
        }
    }

    #[test]
    fn rescaled_three_pixel_error() {
        // 128 px frames: a 1.5 px error becomes 3 px at the evaluation size.
        let gt = vec![Track {
            positions: vec![Pixel::new(10.0, 10.0), Pixel::new(20.0, 20.0)],
            visible: vec![true, true],
        }];
        let pred = vec![TrackResult {
            positions: vec![Pixel::new(10.0, 10.0), Pixel::new(21.5, 20.0)],
            visible: vec![true, true],
            scores: vec![1.0, 1.0],
        }];
        let r = evaluate_tracking(&pred, &gt, 128, 128).unwrap();
        // Frame 1 is correct at 4, 8, 16 but not 1, 2.
        let expect_delta = 100.0 * (1.0 + 1.0 + 2.0 + 2.0 + 2.0) / 10.0;
        assert!((r.delta_avg - expect_delta).abs() < 1e-9);
        assert!((r.oa - 100.0).abs() < 1e-12);
    }

    #[test]
    fn calibration_picks_separating_threshold() {
        let pred = vec![TrackResult {
            positions: vec![Pixel::new(0.0, 0.0); 4],
            visible: vec![true; 4],
            scores: vec![0.9, 0.8, 0.3, 0.2],
        }];
        let gt = vec![Track {
            positions: vec![Pixel::new(0.0, 0.0); 4],
            visible: vec![true, true, false, false],
        }];
        let (thr, oa) = calibrate_occ_threshold(&pred, &gt, &[0.1, 0.5, 0.85]).unwrap();
        assert_eq!(thr, 0.5);
        assert_eq!(oa, 100.0);
    }
}
