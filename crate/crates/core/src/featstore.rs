//! Dense feature maps at patch resolution.
//!
//! A map holds one `C`-vector per patch; per-pixel features come from
//! bilinear interpolation between patch centers, followed by optional L2
//! normalization. Patch `(i, j)` is centered at continuous image coordinates
//! `((j + 0.5) p, (i + 0.5) p)`, so image point `x` lands on grid coordinate
//! `x / p - 0.5` (equivalently `(u + 0.5) / p - 0.5` for pixel index `u`).

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{bilinear_axis, write_atomic, Pixel};

const FTB1_MAGIC: &[u8; 4] = b"FTB1";
const FTB1_HEADER: usize = 4 + 6 * 4;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub hf: usize,
    pub wf: usize,
    pub channels: usize,
    pub patch: usize,
    pub img_w: usize,
    pub img_h: usize,
    /// Row-major `[row][col][channel]`.
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        channels: usize,
        patch: usize,
        img_w: usize,
        img_h: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if patch == 0 || channels == 0 || img_w == 0 || img_h == 0 {
            return Err(Error::config("feature map dims must be nonzero"));
        }
        let m = Self {
            hf: img_h.div_ceil(patch),
            wf: img_w.div_ceil(patch),
            channels,
            patch,
            img_w,
            img_h,
            data,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn zeros(channels: usize, patch: usize, img_w: usize, img_h: usize) -> Result<Self> {
        let n = img_h.div_ceil(patch.max(1)) * img_w.div_ceil(patch.max(1)) * channels;
        Self::new(channels, patch, img_w, img_h, vec![0.0; n])
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.channels == 0 {
            return Err(Error::config("feature map patch and channels must be nonzero"));
        }
        if self.hf != self.img_h.div_ceil(self.patch) || self.wf != self.img_w.div_ceil(self.patch) {
            return Err(Error::config(format!(
                "grid {}x{} inconsistent with {}x{} image at patch {}",
                self.hf, self.wf, self.img_h, self.img_w, self.patch
            )));
        }
        if self.data.len() != self.hf * self.wf * self.channels {
            return Err(Error::config(format!(
                "feature data has {} values, expected {}",
                self.data.len(),
                self.hf * self.wf * self.channels
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::config(format!("non-finite feature value at index {i}")));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.hf * self.wf
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let o = (row * self.wf + col) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let o = (row * self.wf + col) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.hf == other.hf
            && self.wf == other.wf
            && self.channels == other.channels
            && self.patch == other.patch
            && self.img_w == other.img_w
            && self.img_h == other.img_h
    }

    pub fn contains(&self, x: &Pixel) -> bool {
        x.x >= 0.0 && x.y >= 0.0 && x.x <= self.img_w as f64 && x.y <= self.img_h as f64
    }

    /// Bilinear taps `(row, col, weight)` for image point `x`, with grid
    /// coordinates clamped to the border cells. Zero-weight taps are kept so
    /// the result always has four entries.
    pub fn taps(&self, x: &Pixel) -> [(usize, usize, f64); 4] {
        let p = self.patch as f64;
        let (c0, c1, wx) = bilinear_axis(x.x / p - 0.5, self.wf);
        let (r0, r1, wy) = bilinear_axis(x.y / p - 0.5, self.hf);
        [
            (r0, c0, (1.0 - wy) * (1.0 - wx)),
            (r0, c1, (1.0 - wy) * wx),
            (r1, c0, wy * (1.0 - wx)),
            (r1, c1, wy * wx),
        ]
    }

    /// Interpolated, unnormalized feature at `x`, accumulated in f64.
    pub fn sample_raw(&self, x: &Pixel) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        for (r, c, w) in self.taps(x) {
            if w == 0.0 {
                continue;
            }
            for (o, &v) in out.iter_mut().zip(self.cell(r, c)) {
                *o += w * v as f64;
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FTB1_HEADER + 4 * self.data.len());
        out.extend_from_slice(FTB1_MAGIC);
        for v in [self.hf, self.wf, self.channels, self.patch, self.img_w, self.img_h] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != FTB1_MAGIC {
            return Err(Error::format(0, "bad magic, expected FTB1"));
        }
        if bytes.len() < FTB1_HEADER {
            return Err(Error::format(bytes.len(), "truncated FTB1 header"));
        }
        let field = |i: usize| {
            let o = 4 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
        };
        let (hf, wf, channels, patch, img_w, img_h) = (field(0), field(1), field(2), field(3), field(4), field(5));
        let n = hf
            .checked_mul(wf)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Error::format(4, "dimensions overflow"))?;
        let need = FTB1_HEADER + 4 * n;
        if bytes.len() < need {
            return Err(Error::format(
                bytes.len(),
                format!("truncated payload: header claims {n} floats ({need} bytes)"),
            ));
        }
        if bytes.len() > need {
            return Err(Error::format(need, "trailing bytes after payload"));
        }
        let mut data = Vec::with_capacity(n);
        for (i, chunk) in bytes[FTB1_HEADER..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format(FTB1_HEADER + 4 * i, "non-finite feature value"));
            }
            data.push(v);
        }
        let m = Self {
            hf,
            wf,
            channels,
            patch,
            img_w,
            img_h,
            data,
        };
        m.validate().map_err(|e| Error::format(4, e.to_string()))?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }
}

/// Parse an FTB1 file.
pub fn load_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureMap::from_bytes(&bytes)
}

/// A per-pixel feature vector; unit norm when produced by [`l2_normalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct PixelFeature(pub Vec<f64>);

impl PixelFeature {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dot(&self, other: &PixelFeature) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub const MIN_NORM: f64 = 1e-12;

pub fn l2_normalize(v: &[f64]) -> Result<PixelFeature> {
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("feature vector"));
    }
    let n = dot(v, v).sqrt();
    if n < MIN_NORM {
        return Err(Error::DegenerateFeature(n));
    }
    Ok(PixelFeature(v.iter().map(|x| x / n).collect()))
}

/// Bilinearly interpolate the map at image point `x`, then normalize if asked.
pub fn sample_feature(m: &FeatureMap, x: &Pixel, normalize: bool) -> Result<PixelFeature> {
    if !m.contains(x) {
        return Err(Error::config(format!(
            "sample point ({}, {}) outside {}x{} image",
            x.x, x.y, m.img_w, m.img_h
        )));
    }
    let raw = m.sample_raw(x);
    if normalize {
        l2_normalize(&raw)
    } else {
        Ok(PixelFeature(raw))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_map(rng: &mut SplitMix64, c: usize, p: usize, w: usize, h: usize) -> FeatureMap {
        let n = h.div_ceil(p) * w.div_ceil(p) * c;
        FeatureMap::new(c, p, w, h, (0..n).map(|_| rng.normal() as f32).collect()).unwrap()
    }

    #[test]
    fn grid_dims_use_ceil() {
        let m = FeatureMap::zeros(2, 14, 518, 518).unwrap();
        assert_eq!((m.hf, m.wf), (37, 37));
        let m = FeatureMap::zeros(2, 14, 520, 500).unwrap();
        assert_eq!((m.hf, m.wf), (36, 38));
        assert!(FeatureMap::new(2, 14, 518, 518, vec![0.0; 10]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let n = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((n.0[0] - 0.6).abs() < 1e-15 && (n.0[1] - 0.8).abs() < 1e-15);
        let u = l2_normalize(&[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(u.0, vec![0.0, 1.0, 0.0]);
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::DegenerateFeature(_))));
        assert!(l2_normalize(&[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn normalize_sweep() {
        let mut rng = SplitMix64::new(5);
        for _ in 0..10_000 {
            let v: Vec<f64> = (0..8).map(|_| rng.normal() * 10f64.powf(rng.uniform(-3.0, 3.0))).collect();
            let n = l2_normalize(&v).unwrap();
            assert!((n.norm() - 1.0).abs() < 1e-6);
            let nn = l2_normalize(&n.0).unwrap();
            for (a, b) in n.0.iter().zip(&nn.0) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn exact_at_patch_centers() {
        let mut rng = SplitMix64::new(1);
        let m = random_map(&mut rng, 3, 4, 16, 12);
        for i in 0..m.hf {
            for j in 0..m.wf {
                let x = Pixel::new((j as f64 + 0.5) * 4.0, (i as f64 + 0.5) * 4.0);
                let f = sample_feature(&m, &x, false).unwrap();
                for (a, &b) in f.0.iter().zip(m.cell(i, j)) {
                    assert_eq!(*a, b as f64);
                }
            }
        }
    }

    #[test]
    fn midway_is_mean() {
        let data = vec![1.0, 0.0, 3.0, 2.0];
        let m = FeatureMap::new(2, 2, 4, 2, data).unwrap();
        // Patch centers at x = 1 and x = 3.
        let f = sample_feature(&m, &Pixel::new(2.0, 1.0), false).unwrap();
        assert_eq!(f.0, vec![2.0, 1.0]);
        let n = sample_feature(&m, &Pixel::new(2.0, 1.0), true).unwrap();
        let s = 5f64.sqrt();
        assert!((n.0[0] - 2.0 / s).abs() < 1e-15 && (n.0[1] - 1.0 / s).abs() < 1e-15);
    }

    #[test]
    fn constant_map_and_borders() {
        let m = FeatureMap::new(2, 3, 7, 5, [0.5f32, -1.5].repeat(3 * 2)).unwrap();
        for x in [Pixel::new(0.0, 0.0), Pixel::new(7.0, 5.0), Pixel::new(3.3, 2.2)] {
            assert_eq!(sample_feature(&m, &x, false).unwrap().0, vec![0.5, -1.5]);
        }
        assert!(sample_feature(&m, &Pixel::new(7.5, 1.0), false).is_err());
    }

    #[test]
    fn degenerate_interpolation() {
        let m = FeatureMap::new(1, 1, 2, 1, vec![1.0, -1.0]).unwrap();
        assert!(matches!(
            sample_feature(&m, &Pixel::new(1.0, 0.5), true),
            Err(Error::DegenerateFeature(_))
        ));
    }

    #[test]
    fn ftb1_roundtrip_and_errors() {
        let mut rng = SplitMix64::new(2);
        let m = random_map(&mut rng, 3, 14, 30, 20);
        let bytes = m.to_bytes();
        let back = FeatureMap::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
        let err = FeatureMap::from_bytes(&bytes[..bytes.len() - 4]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert!(FeatureMap::from_bytes(b"FTB2").is_err());
        let mut nan = bytes.clone();
        nan[FTB1_HEADER + 8..FTB1_HEADER + 12].copy_from_slice(&f32::INFINITY.to_le_bytes());
        match FeatureMap::from_bytes(&nan) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, FTB1_HEADER + 8),
            other => panic!("{other:?}"),
        }
        // Header inconsistent with ceil arithmetic.
        let mut bad = bytes;
        bad[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(FeatureMap::from_bytes(&bad).is_err());
    }
}
