//! Nearest-neighbor correspondence search over per-pixel feature fields.
//!
//! Every pixel feature is a bilinear mix `r = sum_k w_k c_k` of at most four
//! patch cells, so its cosine with a unit query `q` is
//!
//! ```text
//! cos(q, r) = sum_k w_k (q . c_k) / sqrt(sum_kl w_k w_l (c_k . c_l))
//! ```
//!
//! [`Matcher`] caches the cell Gram entries once per target map; a query then
//! needs one dot product per cell and O(1) work per candidate pixel. Scores
//! agree with `sample_feature(.., normalize = true)` up to rounding.
//!
//! Candidates whose interpolated feature has (near) zero norm have no defined
//! cosine and are skipped.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::featstore::{dot, sample_feature, FeatureMap, PixelFeature, MIN_NORM};
use crate::geometry::{bilinear_axis, pixel_center, DepthMap, Pixel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchResult {
    /// Pixel center of the winning candidate, or a refined subpixel position.
    pub position: Pixel,
    pub col: usize,
    pub row: usize,
    /// Cosine similarity in `[-1, 1]`.
    pub score: f64,
}

/// Which target pixels are eligible: a stride grid anchored at pixel 0,
/// optionally intersected with a per-pixel mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGrid {
    pub stride: usize,
    pub mask: Option<PixelMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelMask {
    pub width: usize,
    pub height: usize,
    pub valid: Vec<bool>,
}

impl PixelMask {
    pub fn from_depth(depth: &DepthMap) -> Self {
        Self {
            width: depth.width,
            height: depth.height,
            valid: depth.values.iter().map(|&d| d > 0.0).collect(),
        }
    }

    pub fn get(&self, col: usize, row: usize) -> bool {
        self.valid[row * self.width + col]
    }
}

impl Default for CandidateGrid {
    fn default() -> Self {
        Self::full(1)
    }
}

impl CandidateGrid {
    pub fn full(stride: usize) -> Self {
        Self { stride, mask: None }
    }

    /// Foreground-only candidates: pixels with positive depth.
    pub fn foreground(depth: &DepthMap, stride: usize) -> Self {
        Self {
            stride,
            mask: Some(PixelMask::from_depth(depth)),
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::config("candidate stride must be at least 1"));
        }
        if let Some(m) = &self.mask {
            if m.width != width || m.height != height || m.valid.len() != width * height {
                return Err(Error::config(format!(
                    "candidate mask is {}x{}, target image is {}x{}",
                    m.width, m.height, width, height
                )));
            }
        }
        Ok(())
    }

    pub fn accepts(&self, col: usize, row: usize) -> bool {
        col % self.stride == 0
            && row % self.stride == 0
            && self.mask.as_ref().is_none_or(|m| m.get(col, row))
    }

    /// Eligible `(col, row)` pixels in row-major order.
    pub fn pixels(&self, width: usize, height: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..height)
            .step_by(self.stride.max(1))
            .flat_map(move |r| (0..width).step_by(self.stride.max(1)).map(move |c| (c, r)))
            .filter(move |&(c, r)| self.mask.as_ref().is_none_or(|m| m.get(c, r)))
    }
}

#[derive(Debug, Clone, Copy)]
struct AxisTap {
    lo: usize,
    hi: usize,
    w_hi: f64,
}

/// Per-quad data for the coarse-to-fine upper bound.
#[derive(Debug, Clone, Copy, Default)]
struct QuadBound {
    /// Lower bound on `|r|` over the convex hull of the quad's corners.
    min_norm: f64,
    max_norm: f64,
}

/// Query-independent precomputation over one target feature map.
#[derive(Debug)]
pub struct Matcher<'a> {
    map: &'a FeatureMap,
    norm2: Vec<f64>,
    right: Vec<f64>,
    down: Vec<f64>,
    diag: Vec<f64>,
    anti: Vec<f64>,
    cols: Vec<AxisTap>,
    rows: Vec<AxisTap>,
    quads: Vec<QuadBound>,
}

/// Dot products of one query with every cell of the target map.
#[derive(Debug, Clone)]
pub struct QueryScores(Vec<f64>);

fn cell64(m: &FeatureMap, r: usize, c: usize) -> Vec<f64> {
    m.cell(r, c).iter().map(|&v| v as f64).collect()
}

impl<'a> Matcher<'a> {
    pub fn new(map: &'a FeatureMap) -> Self {
        let (hf, wf) = (map.hf, map.wf);
        let cells: Vec<Vec<f64>> = (0..hf)
            .flat_map(|r| (0..wf).map(move |c| (r, c)))
            .map(|(r, c)| cell64(map, r, c))
            .collect();
        let at = |r: usize, c: usize| &cells[r * wf + c];
        let n = hf * wf;
        let (mut norm2, mut right, mut down, mut diag, mut anti) =
            (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let mut quads = vec![QuadBound::default(); n];
        for r in 0..hf {
            for c in 0..wf {
                let i = r * wf + c;
                let (r1, c1) = ((r + 1).min(hf - 1), (c + 1).min(wf - 1));
                norm2[i] = dot(at(r, c), at(r, c));
                right[i] = dot(at(r, c), at(r, c1));
                down[i] = dot(at(r, c), at(r1, c));
                diag[i] = dot(at(r, c), at(r1, c1));
                anti[i] = dot(at(r, c1), at(r1, c));
                quads[i] = quad_bound([at(r, c), at(r, c1), at(r1, c), at(r1, c1)]);
            }
        }
        let p = map.patch as f64;
        let cols = (0..map.img_w)
            .map(|col| {
                let (lo, hi, w_hi) = bilinear_axis((col as f64 + 0.5) / p - 0.5, wf);
                AxisTap { lo, hi, w_hi }
            })
            .collect();
        let rows = (0..map.img_h)
            .map(|row| {
                let (lo, hi, w_hi) = bilinear_axis((row as f64 + 0.5) / p - 0.5, hf);
                AxisTap { lo, hi, w_hi }
            })
            .collect();
        Self {
            map,
            norm2,
            right,
            down,
            diag,
            anti,
            cols,
            rows,
            quads,
        }
    }

    pub fn map(&self) -> &FeatureMap {
        self.map
    }

    pub fn query(&self, q: &PixelFeature) -> Result<QueryScores> {
        if q.len() != self.map.channels {
            return Err(Error::config(format!(
                "query has {} channels, target has {}",
                q.len(),
                self.map.channels
            )));
        }
        let m = self.map;
        let s = (0..m.hf)
            .flat_map(|r| (0..m.wf).map(move |c| (r, c)))
            .map(|(r, c)| {
                m.cell(r, c)
                    .iter()
                    .zip(q.as_slice())
                    .map(|(&a, b)| a as f64 * b)
                    .sum()
            })
            .collect();
        Ok(QueryScores(s))
    }

    /// Cosine between the query and the normalized pixel feature at the
    /// center of pixel `(col, row)`; `None` if that feature is degenerate.
    pub fn score(&self, qs: &QueryScores, col: usize, row: usize) -> Option<f64> {
        let ct = self.cols[col];
        let rt = self.rows[row];
        let wf = self.map.wf;
        let (wr0, wr1) = (1.0 - rt.w_hi, rt.w_hi);
        let (wc0, wc1) = (1.0 - ct.w_hi, ct.w_hi);
        let (wa, wb, wc, wd) = (wr0 * wc0, wr0 * wc1, wr1 * wc0, wr1 * wc1);
        let ia = rt.lo * wf + ct.lo;
        let ib = rt.lo * wf + ct.hi;
        let ic = rt.hi * wf + ct.lo;
        let id = rt.hi * wf + ct.hi;
        let s = &qs.0;
        let num = wa * s[ia] + wb * s[ib] + wc * s[ic] + wd * s[id];
        let n2 = wa * wa * self.norm2[ia]
            + wb * wb * self.norm2[ib]
            + wc * wc * self.norm2[ic]
            + wd * wd * self.norm2[id]
            + 2.0
                * (wa * wb * self.right[ia]
                    + wc * wd * self.right[ic]
                    + wa * wc * self.down[ia]
                    + wb * wd * self.down[ib]
                    + wa * wd * self.diag[ia]
                    + wb * wc * self.anti[ia]);
        if !(n2 >= MIN_NORM * MIN_NORM) {
            return None;
        }
        Some((num / n2.sqrt()).clamp(-1.0, 1.0))
    }

    /// Exhaustive argmax over the grid; ties go to the smallest `(row, col)`.
    pub fn best(&self, q: &PixelFeature, grid: &CandidateGrid) -> Result<MatchResult> {
        let m = self.map;
        grid.validate(m.img_w, m.img_h)?;
        let qs = self.query(q)?;
        self.best_scored(&qs, grid.pixels(m.img_w, m.img_h))
            .ok_or(Error::NoCandidates)
    }

    fn best_scored(
        &self,
        qs: &QueryScores,
        pixels: impl Iterator<Item = (usize, usize)>,
    ) -> Option<MatchResult> {
        let mut best: Option<MatchResult> = None;
        for (col, row) in pixels {
            if let Some(s) = self.score(qs, col, row) {
                consider(&mut best, col, row, s);
            }
        }
        best
    }

    /// Coarse-to-fine search that returns exactly what [`Matcher::best`] does.
    ///
    /// Stage 1 scores patch centers, stage 2 scans pixels within
    /// `refine_radius` patches of the coarse winner. Stage 3 widens the search
    /// to every patch quad whose cosine upper bound reaches the current best,
    /// so far-away peaks are never missed. The second value is the number of
    /// quads scanned in stage 3.
    pub fn coarse_to_fine(
        &self,
        q: &PixelFeature,
        grid: &CandidateGrid,
        refine_radius: usize,
    ) -> Result<(MatchResult, usize)> {
        if refine_radius == 0 {
            return Err(Error::config("refine radius must be at least 1 patch"));
        }
        let m = self.map;
        grid.validate(m.img_w, m.img_h)?;
        let qs = self.query(q)?;

        let mut coarse: Option<(usize, usize, f64)> = None;
        for r in 0..m.hf {
            for c in 0..m.wf {
                let n2 = self.norm2[r * m.wf + c];
                if n2 < MIN_NORM * MIN_NORM {
                    continue;
                }
                let s = qs.0[r * m.wf + c] / n2.sqrt();
                if coarse.is_none_or(|(_, _, b)| s > b) {
                    coarse = Some((r, c, s));
                }
            }
        }

        let p = m.patch;
        let mut best = None;
        let mut window = None;
        if let Some((cr, cc, _)) = coarse {
            let r0 = cr.saturating_sub(refine_radius) * p;
            let r1 = ((cr + refine_radius + 1) * p).min(m.img_h);
            let c0 = cc.saturating_sub(refine_radius) * p;
            let c1 = ((cc + refine_radius + 1) * p).min(m.img_w);
            let pixels = (r0..r1)
                .flat_map(|r| (c0..c1).map(move |c| (c, r)))
                .filter(|&(c, r)| grid.accepts(c, r));
            best = self.best_scored(&qs, pixels);
            window = Some((r0, r1, c0, c1));
        }

        // Pixel ranges per quad along each axis.
        let col_groups = axis_groups(&self.cols, m.wf);
        let row_groups = axis_groups(&self.rows, m.hf);
        let mut widened = 0;
        for (qr, rows) in row_groups.iter().enumerate() {
            let Some((ra, rb)) = *rows else { continue };
            for (qc, cols) in col_groups.iter().enumerate() {
                let Some((ca, cb)) = *cols else { continue };
                if let Some((r0, r1, c0, c1)) = window {
                    if ra >= r0 && rb <= r1 && ca >= c0 && cb <= c1 {
                        continue;
                    }
                }
                if let Some(b) = &best {
                    if self.quad_upper_bound(&qs, qr, qc) + 1e-9 < b.score {
                        continue;
                    }
                }
                widened += 1;
                let pixels = (ra..rb)
                    .flat_map(|r| (ca..cb).map(move |c| (c, r)))
                    .filter(|&(c, r)| grid.accepts(c, r));
                for (col, row) in pixels {
                    if let Some(s) = self.score(&qs, col, row) {
                        consider(&mut best, col, row, s);
                    }
                }
            }
        }
        best.map(|b| (b, widened)).ok_or(Error::NoCandidates)
    }

    fn quad_upper_bound(&self, qs: &QueryScores, r: usize, c: usize) -> f64 {
        let wf = self.map.wf;
        let (r1, c1) = ((r + 1).min(self.map.hf - 1), (c + 1).min(wf - 1));
        let top = [r * wf + c, r * wf + c1, r1 * wf + c, r1 * wf + c1]
            .iter()
            .map(|&i| qs.0[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let b = self.quads[r * wf + c];
        if top > 0.0 {
            if b.min_norm > 0.0 {
                (top / b.min_norm).min(1.0)
            } else {
                1.0
            }
        } else if b.max_norm > 0.0 {
            top / b.max_norm
        } else {
            0.0
        }
    }

    /// Softmax-weighted position over the disk of `radius` pixels around the
    /// pixel containing `coarse`, clipped to the image:
    /// `coarse + sum_w softmax(cos_w / T) (w - coarse)`.
    pub fn refine_softmax(
        &self,
        qs: &QueryScores,
        coarse: &Pixel,
        radius: usize,
        temperature: f64,
    ) -> Result<Pixel> {
        if radius == 0 {
            return Err(Error::config("refine radius must be at least 1 pixel"));
        }
        if !(temperature > 0.0) {
            return Err(Error::config(format!("temperature {temperature} must be positive")));
        }
        let m = self.map;
        let cc = (coarse.x.floor().max(0.0) as usize).min(m.img_w - 1);
        let cr = (coarse.y.floor().max(0.0) as usize).min(m.img_h - 1);
        let center = pixel_center(cc, cr);
        let rad = radius as isize;
        let mut taps = Vec::new();
        for dr in -rad..=rad {
            for dc in -rad..=rad {
                if dr * dr + dc * dc > rad * rad {
                    continue;
                }
                let (r, c) = (cr as isize + dr, cc as isize + dc);
                if r < 0 || c < 0 || r >= m.img_h as isize || c >= m.img_w as isize {
                    continue;
                }
                if let Some(s) = self.score(qs, c as usize, r as usize) {
                    taps.push((dc as f64, dr as f64, s));
                }
            }
        }
        if taps.is_empty() {
            return Ok(center);
        }
        let smax = taps.iter().map(|t| t.2).fold(f64::NEG_INFINITY, f64::max);
        let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for &(dx, dy, s) in &taps {
            let w = ((s - smax) / temperature).exp();
            sw += w;
            sx += w * dx;
            sy += w * dy;
        }
        Ok(Pixel::new(center.x + sx / sw, center.y + sy / sw))
    }
}

fn consider(best: &mut Option<MatchResult>, col: usize, row: usize, s: f64) {
    let better = match best {
        None => true,
        Some(b) => s > b.score || (s == b.score && (row, col) < (b.row, b.col)),
    };
    if better {
        *best = Some(MatchResult {
            position: pixel_center(col, row),
            col,
            row,
            score: s,
        });
    }
}

/// Pixel index range `[a, b)` whose lower tap is each grid index.
fn axis_groups(taps: &[AxisTap], n: usize) -> Vec<Option<(usize, usize)>> {
    let mut groups: Vec<Option<(usize, usize)>> = vec![None; n];
    for (i, t) in taps.iter().enumerate() {
        let g = &mut groups[t.lo];
        *g = Some(match *g {
            None => (i, i + 1),
            Some((a, _)) => (a, i + 1),
        });
    }
    groups
}

fn quad_bound(corners: [&Vec<f64>; 4]) -> QuadBound {
    let norms: Vec<f64> = corners.iter().map(|c| dot(c, c).sqrt()).collect();
    let max_norm = norms.iter().cloned().fold(0.0, f64::max);
    let dim = corners[0].len();
    let mut d = vec![0.0; dim];
    for (c, &n) in corners.iter().zip(&norms) {
        if n > 0.0 {
            for (o, v) in d.iter_mut().zip(c.iter()) {
                *o += v / n;
            }
        }
    }
    let dn = dot(&d, &d).sqrt();
    let min_norm = if dn > 0.0 {
        // |r| >= r . d_hat >= min_k c_k . d_hat for any convex combination r.
        let m = corners
            .iter()
            .map(|c| dot(c, &d) / dn)
            .fold(f64::INFINITY, f64::min);
        // Shave a little so rounding never makes the bound optimistic.
        (m * (1.0 - 1e-12)).max(0.0)
    } else {
        0.0
    };
    QuadBound { min_norm, max_norm }
}

/// Exhaustive nearest neighbor of `q` among the grid pixels of `target`.
pub fn best_match(q: &PixelFeature, target: &FeatureMap, grid: &CandidateGrid) -> Result<MatchResult> {
    Matcher::new(target).best(q, grid)
}

/// Coarse-to-fine nearest neighbor; identical to [`best_match`] by construction.
pub fn coarse_to_fine_match(
    q: &PixelFeature,
    target: &FeatureMap,
    grid: &CandidateGrid,
    refine_radius: usize,
) -> Result<MatchResult> {
    Matcher::new(target)
        .coarse_to_fine(q, grid, refine_radius)
        .map(|(m, _)| m)
}

/// Softmax refinement around `coarse`; see [`Matcher::refine_softmax`].
pub fn refine_softmax(
    target: &FeatureMap,
    q: &PixelFeature,
    coarse: &Pixel,
    radius: usize,
    temperature: f64,
) -> Result<Pixel> {
    let m = Matcher::new(target);
    let qs = m.query(q)?;
    m.refine_softmax(&qs, coarse, radius, temperature)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MutualMatches {
    /// Number of mutual pairs, the "#inliers" statistic.
    pub count: usize,
    pub pairs: Vec<(Pixel, Pixel)>,
}

/// Pixel pairs `(x, y)` where `x`'s nearest neighbor in `b` is `y` and `y`'s
/// nearest neighbor in `a` lies within `px_tol` of `x`.
pub fn mutual_matches(
    a: &FeatureMap,
    b: &FeatureMap,
    grid: &CandidateGrid,
    px_tol: f64,
) -> Result<MutualMatches> {
    if a.channels != b.channels {
        return Err(Error::config(format!(
            "channel mismatch: {} vs {}",
            a.channels, b.channels
        )));
    }
    grid.validate(a.img_w, a.img_h)?;
    grid.validate(b.img_w, b.img_h)?;
    let ma = Matcher::new(a);
    let mb = Matcher::new(b);
    let sources: Vec<(usize, usize)> = grid.pixels(a.img_w, a.img_h).collect();
    let pairs: Vec<Option<(Pixel, Pixel)>> = sources
        .par_iter()
        .map(|&(c, r)| {
            let x = pixel_center(c, r);
            let qa = sample_feature(a, &x, true).ok()?;
            let y = mb.best(&qa, grid).ok()?;
            let qb = sample_feature(b, &y.position, true).ok()?;
            let back = ma.best(&qb, grid).ok()?;
            ((back.position - x).norm() <= px_tol).then_some((x, y.position))
        })
        .collect();
    let pairs: Vec<(Pixel, Pixel)> = pairs.into_iter().flatten().collect();
    Ok(MutualMatches {
        count: pairs.len(),
        pairs,
    })
}
