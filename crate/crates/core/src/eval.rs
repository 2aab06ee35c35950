//! The equivariance protocol: for every ordered view pair of an object,
//! match each ground-truth source pixel into the target view and score the
//! matches with APE and PCDP.

use log::debug;
use rayon::prelude::*;

use crate::convhead::{head_forward, HeadParams};
use crate::error::{Error, Result};
use crate::featstore::sample_feature;
use crate::geometry::{gt_correspondences, CorrespondenceSet, ObjectViews, OcclusionTolerance, ViewRecord};
use crate::matching::{CandidateGrid, MatchResult, Matcher};
use crate::metrics::{EquivarianceAccumulator, EquivarianceReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Search {
    Exhaustive,
    /// Exact branch-and-bound search seeded at the best patch.
    CoarseToFine { radius: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivConfig {
    /// Stride of the source-pixel grid for ground-truth pairs.
    pub gt_stride: usize,
    /// Stride of the target candidate grid.
    pub candidate_stride: usize,
    /// Restrict targets to pixels with valid depth (object-centric default).
    pub foreground_only: bool,
    pub occ: OcclusionTolerance,
    pub search: Search,
}

impl Default for EquivConfig {
    fn default() -> Self {
        Self {
            gt_stride: 1,
            candidate_stride: 1,
            foreground_only: true,
            occ: OcclusionTolerance::default(),
            search: Search::CoarseToFine { radius: 1 },
        }
    }
}

/// Replace every view's features with the head output. An identity head
/// leaves the maps untouched, so results match the frozen baseline exactly.
pub fn apply_head(objects: &mut [ObjectViews], head: &HeadParams) -> Result<()> {
    if head.is_identity() {
        return Ok(());
    }
    for o in objects.iter_mut() {
        for v in o.views.iter_mut() {
            if let Some(f) = v.features.as_mut() {
                *f = head_forward(f, head)?;
            }
        }
    }
    Ok(())
}

/// Ground truth from `a` to `b` and the matched positions in `b`, with
/// source pixels whose features are degenerate dropped from both.
pub fn match_pair(a: &ViewRecord, b: &ViewRecord, cfg: &EquivConfig) -> Result<(CorrespondenceSet, Vec<MatchResult>)> {
    let fa = a.features_checked()?;
    let fb = b.features_checked()?;
    if fa.channels != fb.channels {
        return Err(Error::config(format!(
            "views {} and {} have {} and {} channels",
            a.id, b.id, fa.channels, fb.channels
        )));
    }
    let mut gt = gt_correspondences(a, b, cfg.gt_stride, &cfg.occ)?;
    let grid = if cfg.foreground_only {
        CandidateGrid::foreground(b.depth_checked()?, cfg.candidate_stride)
    } else {
        CandidateGrid::full(cfg.candidate_stride)
    };
    let matcher = Matcher::new(fb);
    let preds: Vec<Option<MatchResult>> = gt
        .pairs
        .par_iter()
        .map(|c| {
            let Ok(q) = sample_feature(fa, &c.x1, true) else { return Ok(None) };
            let m = match cfg.search {
                Search::Exhaustive => matcher.best(&q, &grid),
                Search::CoarseToFine { radius } => matcher.coarse_to_fine(&q, &grid, radius).map(|r| r.0),
            };
            match m {
                Ok(m) => Ok(Some(m)),
                Err(Error::NoCandidates) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let mut kept = Vec::with_capacity(preds.len());
    let mut pairs = Vec::with_capacity(preds.len());
    let mut dropped = 0;
    for (c, p) in gt.pairs.drain(..).zip(preds) {
        match p {
            Some(p) => {
                pairs.push(c);
                kept.push(p);
            }
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        debug!("{} -> {}: {dropped} source pixels without a usable match", a.id, b.id);
    }
    gt.pairs = pairs;
    Ok((gt, kept))
}

/// APE and PCDP over all ordered view pairs of every object.
pub fn evaluate_equivariance(objects: &[ObjectViews], cfg: &EquivConfig) -> Result<EquivarianceReport> {
    let mut acc = EquivarianceAccumulator::default();
    for o in objects {
        let n = o.views.len();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let (gt, pred) = match_pair(&o.views[i], &o.views[j], cfg)?;
                acc.add(&gt, &pred)?;
            }
        }
    }
    if acc.correspondences() == 0 {
        return Err(Error::config(
            "no ground-truth correspondences between any view pair; use more views or a finer grid",
        ));
    }
    Ok(acc.report())
}
