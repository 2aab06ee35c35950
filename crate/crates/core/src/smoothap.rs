//! SmoothAP ranking objective, exact average precision, and a multi-positive
//! InfoNCE baseline.
//!
//! For a query `q` with positives `P` and negatives `N`, scores are
//! `s_k = f_k . q` and `D_ij = s_j - s_i`. SmoothAP averages, over `i` in `P`,
//!
//! ```text
//! (1 + sum_{j in P, j != i} sig(D_ij / tau))
//!   / (1 + sum_{j in P, j != i} sig(D_ij / tau) + sum_{j in N} sig(D_ij / tau))
//! ```
//!
//! which is a sigmoid-relaxed version of (rank among positives) / (overall
//! rank). With `include_self_term` the `j = i` term (a constant `sig(0) = 0.5`)
//! is kept in both sums.
//!
//! Gradients are analytic and computed w.r.t. the raw input vectors (no
//! normalization is applied inside the loss).

use crate::error::{Error, Result};
use crate::featstore::{dot, PixelFeature};

#[derive(Debug, Clone, PartialEq)]
pub struct RankingInstance {
    pub query: PixelFeature,
    pub positives: Vec<PixelFeature>,
    pub negatives: Vec<PixelFeature>,
    /// Sigmoid temperature `tau > 0`.
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothApOptions {
    pub include_self_term: bool,
}

impl Default for SmoothApOptions {
    fn default() -> Self {
        Self {
            include_self_term: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub d_query: Vec<f64>,
    pub d_positives: Vec<Vec<f64>>,
    pub d_negatives: Vec<Vec<f64>>,
}

impl LossGrad {
    pub fn is_finite(&self) -> bool {
        self.loss.is_finite()
            && self.d_query.iter().all(|v| v.is_finite())
            && self
                .d_positives
                .iter()
                .chain(&self.d_negatives)
                .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl RankingInstance {
    fn check(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config(format!("temperature {} must be positive", self.temperature)));
        }
        if self.positives.is_empty() {
            return Err(Error::config("ranking instance needs at least one positive"));
        }
        let c = self.query.len();
        if self.positives.iter().chain(&self.negatives).any(|f| f.len() != c) {
            return Err(Error::config("ranking instance features differ in length"));
        }
        Ok(())
    }

    fn scores(&self) -> (Vec<f64>, Vec<f64>) {
        let q = self.query.as_slice();
        let sp = self.positives.iter().map(|f| dot(f.as_slice(), q)).collect();
        let sn = self.negatives.iter().map(|f| dot(f.as_slice(), q)).collect();
        (sp, sn)
    }
}

/// SmoothAP value and its gradient w.r.t. positive and negative scores.
pub(crate) fn smooth_ap_scores(sp: &[f64], sn: &[f64], tau: f64, opts: SmoothApOptions) -> (f64, Vec<f64>, Vec<f64>) {
    let np = sp.len();
    let self_term = if opts.include_self_term { 0.5 } else { 0.0 };
    let mut ap = 0.0;
    let mut gp = vec![0.0; np];
    let mut gn = vec![0.0; sn.len()];
    for i in 0..np {
        let mut a = 1.0 + self_term;
        for j in 0..np {
            if j != i {
                a += sigmoid((sp[j] - sp[i]) / tau);
            }
        }
        let b: f64 = sn.iter().map(|&s| sigmoid((s - sp[i]) / tau)).sum();
        let z = a + b;
        ap += a / z;
        // d(a/z)/da = b/z^2, d(a/z)/db = -a/z^2.
        let da = b / (z * z) / np as f64;
        let db = -a / (z * z) / np as f64;
        for j in 0..np {
            if j == i {
                continue;
            }
            let sg = sigmoid((sp[j] - sp[i]) / tau);
            let g = da * sg * (1.0 - sg) / tau;
            gp[j] += g;
            gp[i] -= g;
        }
        for (j, &s) in sn.iter().enumerate() {
            let sg = sigmoid((s - sp[i]) / tau);
            let g = db * sg * (1.0 - sg) / tau;
            gn[j] += g;
            gp[i] -= g;
        }
    }
    (ap / np as f64, gp, gn)
}

pub fn smooth_ap(inst: &RankingInstance) -> Result<f64> {
    smooth_ap_with(inst, SmoothApOptions::default())
}

pub fn smooth_ap_with(inst: &RankingInstance, opts: SmoothApOptions) -> Result<f64> {
    inst.check()?;
    let (sp, sn) = inst.scores();
    Ok(smooth_ap_scores(&sp, &sn, inst.temperature, opts).0)
}

/// Chain score gradients `dL/ds_k` into vector gradients: `ds_k/df_k = q`,
/// `ds_k/dq = f_k`.
fn chain_scores(inst: &RankingInstance, loss: f64, gp: &[f64], gn: &[f64]) -> LossGrad {
    let q = inst.query.as_slice();
    let mut d_query = vec![0.0; q.len()];
    let mut d_positives = Vec::with_capacity(gp.len());
    let mut d_negatives = Vec::with_capacity(gn.len());
    for (f, &g) in inst.positives.iter().zip(gp) {
        d_positives.push(q.iter().map(|v| g * v).collect());
        for (d, v) in d_query.iter_mut().zip(f.as_slice()) {
            *d += g * v;
        }
    }
    for (f, &g) in inst.negatives.iter().zip(gn) {
        d_negatives.push(q.iter().map(|v| g * v).collect());
        for (d, v) in d_query.iter_mut().zip(f.as_slice()) {
            *d += g * v;
        }
    }
    LossGrad {
        loss,
        d_query,
        d_positives,
        d_negatives,
    }
}

/// `1 - SmoothAP` and its analytic gradients.
pub fn smooth_ap_grad(inst: &RankingInstance) -> Result<LossGrad> {
    smooth_ap_grad_with(inst, SmoothApOptions::default())
}

pub fn smooth_ap_grad_with(inst: &RankingInstance, opts: SmoothApOptions) -> Result<LossGrad> {
    inst.check()?;
    let (sp, sn) = inst.scores();
    let (ap, gp, gn) = smooth_ap_scores(&sp, &sn, inst.temperature, opts);
    let neg = |g: Vec<f64>| g.into_iter().map(|v| -v).collect::<Vec<_>>();
    Ok(chain_scores(inst, 1.0 - ap, &neg(gp), &neg(gn)))
}

/// Hard-ranking average precision. Ties are broken pessimistically: a
/// negative with the same score ranks ahead of the positive.
pub fn exact_ap(pos_scores: &[f64], neg_scores: &[f64]) -> f64 {
    if pos_scores.is_empty() {
        return 0.0;
    }
    let mut sorted = pos_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut ap = 0.0;
    for (k, &s) in sorted.iter().enumerate() {
        let neg_ahead = neg_scores.iter().filter(|&&o| o >= s).count();
        ap += (k + 1) as f64 / (k + 1 + neg_ahead) as f64;
    }
    ap / pos_scores.len() as f64
}

/// Multi-positive InfoNCE:
/// `-log(sum_P exp(s/T) / (sum_P exp(s/T) + sum_N exp(s/T)))`.
pub fn contrastive_loss(inst: &RankingInstance, temp: f64) -> Result<LossGrad> {
    inst.check()?;
    if !(temp > 0.0) {
        return Err(Error::config(format!("contrastive temperature {temp} must be positive")));
    }
    let (sp, sn) = inst.scores();
    let (loss, gp, gn) = contrastive_scores(&sp, &sn, temp);
    Ok(chain_scores(inst, loss, &gp, &gn))
}

/// InfoNCE loss and its gradient w.r.t. positive and negative scores.
pub(crate) fn contrastive_scores(sp: &[f64], sn: &[f64], temp: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let m = sp.iter().chain(sn).map(|s| s / temp).fold(f64::NEG_INFINITY, f64::max);
    let ep: Vec<f64> = sp.iter().map(|s| (s / temp - m).exp()).collect();
    let en: Vec<f64> = sn.iter().map(|s| (s / temp - m).exp()).collect();
    let sum_p: f64 = ep.iter().sum();
    let sum_n: f64 = en.iter().sum();
    let z = sum_p + sum_n;
    let loss = -(sum_p.ln() - z.ln());
    let gp = ep.iter().map(|e| (e / z - e / sum_p) / temp).collect();
    let gn = en.iter().map(|e| e / z / temp).collect();
    (loss, gp, gn)
}
