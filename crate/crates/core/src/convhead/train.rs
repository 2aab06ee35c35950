//! Correspondence finetuning of the conv head.
//!
//! Each iteration draws one object and an ordered pair of its views, samples
//! ground-truth correspondences and ranks, for every query pixel in view A,
//! its correspondent in view B above the other sampled pixels of view B.

use std::collections::HashMap;

use log::{debug, warn};

use super::{adamw_step, backward_tensor, forward_tensor, AdamWState, HeadGrads, HeadParams, Tensor3};
use crate::error::{Error, Result};
use crate::featstore::{dot, FeatureMap, MIN_NORM};
use crate::geometry::{pixel_center, CorrespondenceSet, ObjectViews, OcclusionTolerance, Pixel};
use crate::rng::SplitMix64;
use crate::smoothap::{contrastive_scores, smooth_ap_scores, SmoothApOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    SmoothAp,
    Contrastive,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth-ap" | "smoothap" => Ok(Self::SmoothAp),
            "contrastive" => Ok(Self::Contrastive),
            other => Err(Error::config(format!("unknown loss '{other}', expected smooth-ap or contrastive"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub pixels_per_pair: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// SmoothAP sigmoid temperature.
    pub tau: f64,
    /// Contrastive softmax temperature.
    pub temp: f64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Grid stride for ground-truth correspondences in view A.
    pub gt_stride: usize,
    pub occ: OcclusionTolerance,
    /// 0 keeps only the pixel nearest the correspondent as positive; a
    /// positive radius adds every pixel center within it.
    pub positive_radius: f64,
    /// Other samples whose correspondent lies within this distance of the
    /// query's correspondent are not used as its negatives.
    pub negative_exclusion_px: f64,
    pub include_self_term: bool,
    /// Resampling budget for view pairs with fewer than two correspondences.
    pub max_retries: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            pixels_per_pair: 256,
            seed: 0,
            loss: LossKind::SmoothAp,
            tau: 1.0,
            temp: 0.07,
            lr: 1e-5,
            weight_decay: 1e-4,
            gt_stride: 1,
            occ: OcclusionTolerance::default(),
            positive_radius: 0.0,
            negative_exclusion_px: 2.0,
            include_self_term: false,
            max_retries: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pixels_per_pair < 2 {
            return Err(Error::config("pixels_per_pair must be at least 2"));
        }
        if self.gt_stride == 0 {
            return Err(Error::config("gt_stride must be at least 1"));
        }
        for (name, v) in [("tau", self.tau), ("temp", self.temp)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("lr and weight_decay must be finite and nonnegative"));
        }
        if !(self.positive_radius >= 0.0) || !(self.negative_exclusion_px >= 0.0) {
            return Err(Error::config("radii must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: HeadParams,
    /// Mean loss over queries, one entry per iteration.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("iteration,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{i},{l}\n"));
        }
        s
    }
}

/// One interpolated sample of a head output: raw vector, its norm and taps.
struct Sample {
    taps: [(usize, usize, f64); 4],
    unit: Vec<f64>,
    norm: f64,
}

fn sample(out: &Tensor3, grid: &FeatureMap, x: &Pixel) -> Option<Sample> {
    let taps = grid.taps(x);
    let mut raw = vec![0.0; out.c];
    for &(r, c, w) in &taps {
        if w == 0.0 {
            continue;
        }
        for (o, v) in raw.iter_mut().zip(out.cell(r, c)) {
            *o += w * v;
        }
    }
    let norm = dot(&raw, &raw).sqrt();
    if !(norm >= MIN_NORM) {
        return None;
    }
    let unit = raw.iter().map(|v| v / norm).collect();
    Some(Sample { taps, unit, norm })
}

/// Chain `dL/d(unit)` through normalization and bilinear taps into `d_out`.
fn scatter(s: &Sample, d_unit: &[f64], d_out: &mut Tensor3) {
    let proj = dot(&s.unit, d_unit);
    for &(r, c, w) in &s.taps {
        if w == 0.0 {
            continue;
        }
        let cell = d_out.cell_mut(r, c);
        for ((g, &du), &u) in cell.iter_mut().zip(d_unit).zip(&s.unit) {
            *g += w * (du - u * proj) / s.norm;
        }
    }
}

fn add_grads(acc: &mut HeadGrads, g: &HeadGrads) {
    for (a, b) in acc.params_mut().zip(g.params()) {
        *a += b;
    }
}

/// Pixel centers within `radius` of `x`, nearest first; always includes the
/// pixel containing `x`.
fn positive_pixels(x: &Pixel, radius: f64, w: usize, h: usize) -> Vec<Pixel> {
    let col = (x.x.floor().max(0.0) as usize).min(w - 1);
    let row = (x.y.floor().max(0.0) as usize).min(h - 1);
    let nearest = pixel_center(col, row);
    let mut out = vec![nearest];
    if radius > 0.0 {
        let r = radius.ceil() as isize + 1;
        for dy in -r..=r {
            for dx in -r..=r {
                let (c, rr) = (col as isize + dx, row as isize + dy);
                if (dx, dy) == (0, 0) || c < 0 || rr < 0 || c >= w as isize || rr >= h as isize {
                    continue;
                }
                let p = pixel_center(c as usize, rr as usize);
                if (p - x).norm() <= radius {
                    out.push(p);
                }
            }
        }
    }
    out
}

type PairKey = (usize, usize, usize);

/// Finetune `init` on ground-truth correspondences from `dataset`.
///
/// The loop is single-threaded and fully determined by `cfg.seed`.
pub fn train(dataset: &[ObjectViews], cfg: &TrainConfig, init: HeadParams) -> Result<TrainOutcome> {
    cfg.validate()?;
    init.validate()?;
    let mut eligible = Vec::new();
    for (k, obj) in dataset.iter().enumerate() {
        if obj.views.len() < 2 {
            warn!("object {} has {} view(s); skipped", obj.id, obj.views.len());
            continue;
        }
        for v in &obj.views {
            v.depth_checked()?;
            let f = v.features_checked()?;
            if f.img_w != v.intrinsics.width || f.img_h != v.intrinsics.height {
                return Err(Error::config(format!(
                    "view {}: features cover {}x{}, image is {}x{}",
                    v.id, f.img_w, f.img_h, v.intrinsics.width, v.intrinsics.height
                )));
            }
        }
        eligible.push(k);
    }
    if eligible.is_empty() {
        return Err(Error::config("training needs at least one object with two or more views"));
    }

    let mut params = init;
    let mut opt = AdamWState::new(params.num_params(), cfg.lr, cfg.weight_decay);
    let mut rng = SplitMix64::stream(cfg.seed, 0x7261_696e);
    let mut gt_cache: HashMap<PairKey, CorrespondenceSet> = HashMap::new();
    let mut losses = Vec::with_capacity(cfg.iterations);
    let opts = SmoothApOptions {
        include_self_term: cfg.include_self_term,
    };

    for it in 0..cfg.iterations {
        let mut drawn = None;
        for _ in 0..=cfg.max_retries {
            let o = eligible[rng.below(eligible.len())];
            let pick = rng.sample_distinct(dataset[o].views.len(), 2);
            let key = (o, pick[0], pick[1]);
            if !gt_cache.contains_key(&key) {
                let views = &dataset[o].views;
                let set = crate::geometry::gt_correspondences(&views[key.1], &views[key.2], cfg.gt_stride, &cfg.occ)?;
                gt_cache.insert(key, set);
            }
            if gt_cache[&key].len() >= 2 {
                drawn = Some(key);
                break;
            }
        }
        let key = drawn.ok_or_else(|| Error::NoCorrespondences(cfg.max_retries + 1))?;
        let (o, ia, ib) = key;
        let gt = &gt_cache[&key];
        let va = &dataset[o].views[ia];
        let vb = &dataset[o].views[ib];
        let fa = va.features_checked()?;
        let fb = vb.features_checked()?;

        let (ya, cache_a) = forward_tensor(&Tensor3::from_map(fa), &params)?;
        let (yb, cache_b) = forward_tensor(&Tensor3::from_map(fb), &params)?;

        let k = cfg.pixels_per_pair.min(gt.len());
        let idx = rng.sample_distinct(gt.len(), k);

        // Queries in A, and per query a list of positive samples in B. The
        // first positive is the nearest pixel; it doubles as a negative for
        // the other queries.
        let mut queries = Vec::with_capacity(k);
        let mut targets = Vec::with_capacity(k);
        let mut positives: Vec<Vec<Sample>> = Vec::with_capacity(k);
        for &i in &idx {
            let c = &gt.pairs[i];
            let Some(q) = sample(&ya, fa, &c.x1) else { continue };
            let ps: Vec<Sample> = positive_pixels(&c.x2, cfg.positive_radius, fb.img_w, fb.img_h)
                .iter()
                .filter_map(|x| sample(&yb, fb, x))
                .collect();
            if ps.is_empty() {
                continue;
            }
            queries.push(q);
            targets.push(c.x2);
            positives.push(ps);
        }

        let n = queries.len();
        let mut d_q: Vec<Vec<f64>> = vec![vec![0.0; ya.c]; n];
        let mut d_p: Vec<Vec<Vec<f64>>> = positives.iter().map(|ps| vec![vec![0.0; yb.c]; ps.len()]).collect();
        let mut total = 0.0;
        let mut used = 0usize;
        for i in 0..n {
            let q = &queries[i].unit;
            let neg_ids: Vec<usize> = (0..n)
                .filter(|&j| j != i && (targets[j] - targets[i]).norm() > cfg.negative_exclusion_px)
                .collect();
            if neg_ids.is_empty() {
                continue;
            }
            let sp: Vec<f64> = positives[i].iter().map(|p| dot(q, &p.unit)).collect();
            let sn: Vec<f64> = neg_ids.iter().map(|&j| dot(q, &positives[j][0].unit)).collect();
            let (loss, gp, gn) = match cfg.loss {
                LossKind::SmoothAp => {
                    let (ap, gp, gn) = smooth_ap_scores(&sp, &sn, cfg.tau, opts);
                    (1.0 - ap, gp.iter().map(|g| -g).collect::<Vec<_>>(), gn.iter().map(|g| -g).collect())
                }
                LossKind::Contrastive => contrastive_scores(&sp, &sn, cfg.temp),
            };
            total += loss;
            used += 1;
            for (m, &g) in gp.iter().enumerate() {
                for ((dq, dp), (&qv, &pv)) in d_q[i]
                    .iter_mut()
                    .zip(d_p[i][m].iter_mut())
                    .zip(q.iter().zip(&positives[i][m].unit))
                {
                    *dq += g * pv;
                    *dp += g * qv;
                }
            }
            for (&j, &g) in neg_ids.iter().zip(&gn) {
                let nu = &positives[j][0].unit;
                for c in 0..q.len() {
                    d_q[i][c] += g * nu[c];
                    d_p[j][0][c] += g * q[c];
                }
            }
        }

        let mean = if used > 0 { total / used as f64 } else { 0.0 };
        let scale = if used > 0 { 1.0 / used as f64 } else { 0.0 };
        let mut d_ya = Tensor3::zeros(ya.h, ya.w, ya.c);
        let mut d_yb = Tensor3::zeros(yb.h, yb.w, yb.c);
        for (s, g) in queries.iter().zip(&d_q) {
            let g: Vec<f64> = g.iter().map(|v| v * scale).collect();
            scatter(s, &g, &mut d_ya);
        }
        for (ps, gs) in positives.iter().zip(&d_p) {
            for (s, g) in ps.iter().zip(gs) {
                let g: Vec<f64> = g.iter().map(|v| v * scale).collect();
                scatter(s, &g, &mut d_yb);
            }
        }
        let (mut grads, _) = backward_tensor(&params, &cache_a, &d_ya)?;
        let (gb, _) = backward_tensor(&params, &cache_b, &d_yb)?;
        add_grads(&mut grads, &gb);
        if !mean.is_finite() || !grads.params().all(f64::is_finite) {
            return Err(Error::NonFinite("training gradient"));
        }
        adamw_step(&mut params, &grads, &mut opt)?;
        debug!("iteration {it}: pair {}->{} loss {mean:.6} over {used} queries", va.id, vb.id);
        losses.push(mean);
    }
    if cfg.iterations > 0 {
        params.quantize();
    }
    Ok(TrainOutcome { params, losses })
}

/// Mean training loss and its parameter gradient for one fixed view pair and
/// fixed query set; used to check the training gradient end to end.
#[doc(hidden)]
pub fn pair_loss_and_grad(
    fa: &FeatureMap,
    fb: &FeatureMap,
    pairs: &[(Pixel, Pixel)],
    params: &HeadParams,
    cfg: &TrainConfig,
) -> Result<(f64, HeadGrads)> {
    let (ya, cache_a) = forward_tensor(&Tensor3::from_map(fa), params)?;
    let (yb, cache_b) = forward_tensor(&Tensor3::from_map(fb), params)?;
    let opts = SmoothApOptions {
        include_self_term: cfg.include_self_term,
    };
    let qs: Vec<Sample> = pairs
        .iter()
        .map(|(x1, _)| sample(&ya, fa, x1).ok_or(Error::DegenerateFeature(0.0)))
        .collect::<Result<_>>()?;
    let ps: Vec<Sample> = pairs
        .iter()
        .map(|(_, x2)| sample(&yb, fb, x2).ok_or(Error::DegenerateFeature(0.0)))
        .collect::<Result<_>>()?;
    let n = pairs.len();
    let mut d_q = vec![vec![0.0; ya.c]; n];
    let mut d_p = vec![vec![0.0; yb.c]; n];
    let mut total = 0.0;
    for i in 0..n {
        let q = &qs[i].unit;
        let sp = [dot(q, &ps[i].unit)];
        let neg: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let sn: Vec<f64> = neg.iter().map(|&j| dot(q, &ps[j].unit)).collect();
        let (loss, gp, gn) = match cfg.loss {
            LossKind::SmoothAp => {
                let (ap, gp, gn) = smooth_ap_scores(&sp, &sn, cfg.tau, opts);
                (1.0 - ap, vec![-gp[0]], gn.iter().map(|g| -g).collect::<Vec<_>>())
            }
            LossKind::Contrastive => contrastive_scores(&sp, &sn, cfg.temp),
        };
        total += loss / n as f64;
        for c in 0..q.len() {
            d_q[i][c] += gp[0] * ps[i].unit[c] / n as f64;
            d_p[i][c] += gp[0] * q[c] / n as f64;
        }
        for (&j, &g) in neg.iter().zip(&gn) {
            for c in 0..q.len() {
                d_q[i][c] += g * ps[j].unit[c] / n as f64;
                d_p[j][c] += g * q[c] / n as f64;
            }
        }
    }
    let mut d_ya = Tensor3::zeros(ya.h, ya.w, ya.c);
    let mut d_yb = Tensor3::zeros(yb.h, yb.w, yb.c);
    for (s, g) in qs.iter().zip(&d_q) {
        scatter(s, g, &mut d_ya);
    }
    for (s, g) in ps.iter().zip(&d_p) {
        scatter(s, g, &mut d_yb);
    }
    let (mut grads, _) = backward_tensor(params, &cache_a, &d_ya)?;
    let (gb, _) = backward_tensor(params, &cache_b, &d_yb)?;
    add_grads(&mut grads, &gb);
    Ok((total, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_map(rng: &mut SplitMix64, c: usize, p: usize, w: usize, h: usize) -> FeatureMap {
        let hf = h.div_ceil(p);
        let wf = w.div_ceil(p);
        FeatureMap::new(c, p, w, h, (0..hf * wf * c).map(|_| rng.normal() as f32).collect()).unwrap()
    }

    #[test]
    fn pair_gradient_matches_finite_differences() {
        let mut rng = SplitMix64::new(11);
        let fa = random_map(&mut rng, 3, 2, 8, 8);
        let fb = random_map(&mut rng, 3, 2, 8, 8);
        let pairs: Vec<(Pixel, Pixel)> = (0..5)
            .map(|_| {
                (
                    Pixel::new(rng.uniform(0.0, 8.0), rng.uniform(0.0, 8.0)),
                    Pixel::new(rng.uniform(0.0, 8.0), rng.uniform(0.0, 8.0)),
                )
            })
            .collect();
        let mut p = HeadParams::zero_init(3, 1).unwrap();
        for v in p.params_mut() {
            *v = 0.1 * rng.normal();
        }
        for loss in [LossKind::SmoothAp, LossKind::Contrastive] {
            let cfg = TrainConfig {
                loss,
                tau: 0.2,
                temp: 0.5,
                ..TrainConfig::default()
            };
            let (_, g) = pair_loss_and_grad(&fa, &fb, &pairs, &p, &cfg).unwrap();
            let analytic: Vec<f64> = g.params().collect();
            let h = 1e-6;
            for (k, &ga) in analytic.iter().enumerate() {
                let mut plus = p.clone();
                let mut minus = p.clone();
                *plus.params_mut().nth(k).unwrap() += h;
                *minus.params_mut().nth(k).unwrap() -= h;
                let lp = pair_loss_and_grad(&fa, &fb, &pairs, &plus, &cfg).unwrap().0;
                let lm = pair_loss_and_grad(&fa, &fb, &pairs, &minus, &cfg).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - ga).abs() <= 1e-6 + 1e-4 * fd.abs(), "{loss:?} param {k}: {fd} vs {ga}");
            }
        }
    }

    #[test]
    fn positive_ball() {
        let x = Pixel::new(5.2, 5.7);
        assert_eq!(positive_pixels(&x, 0.0, 10, 10), vec![pixel_center(5, 5)]);
        let ball = positive_pixels(&x, 1.0, 10, 10);
        assert_eq!(ball[0], pixel_center(5, 5));
        assert!(ball.iter().all(|p| (p - x).norm() <= 1.0 || *p == pixel_center(5, 5)));
        assert!(ball.contains(&pixel_center(5, 6)));
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            pixels_per_pair: 1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!("contrastive".parse::<LossKind>().is_ok());
        assert!("triplet".parse::<LossKind>().is_err());
    }
}
