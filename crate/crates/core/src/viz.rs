//! Joint PCA visualization of two feature volumes, and mask overlays.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensorio::{FeatureVolume, RgbFrame};

/// Eigenvalues below this fraction of the largest are treated as zero.
pub const RANK_TOLERANCE: f64 = 1e-9;

/// Top three principal directions of the pooled pixels of two volumes.
#[derive(Debug, Clone)]
pub struct PcaBasis {
    pub mean: DVector<f64>,
    /// `C x 3`; columns of rank-deficient directions are zero.
    pub components: DMatrix<f64>,
    pub eigenvalues: [f64; 3],
}

fn pixels(vol: &FeatureVolume) -> impl Iterator<Item = Vec<f64>> + '_ {
    let s = vol.shape();
    (0..s.frames).flat_map(move |t| {
        (0..s.height).flat_map(move |y| {
            (0..s.width).map(move |x| {
                (0..s.channels)
                    .map(|c| vol.get(t, c, y, x) as f64)
                    .collect()
            })
        })
    })
}

impl PcaBasis {
    pub fn fit(vols: &[&FeatureVolume]) -> Result<Self> {
        let channels = vols
            .first()
            .ok_or_else(|| Error::config("no volumes to fit"))?
            .shape()
            .channels;
        if channels < 3 {
            return Err(Error::config(format!(
                "PCA to RGB needs at least 3 channels, got {channels}"
            )));
        }
        if let Some(v) = vols.iter().find(|v| v.shape().channels != channels) {
            return Err(Error::shape(format!(
                "channel mismatch: {} vs {channels}",
                v.shape().channels
            )));
        }

        let n: usize = vols
            .iter()
            .map(|v| v.shape().frames * v.shape().plane_len())
            .sum();
        let mut mean = DVector::<f64>::zeros(channels);
        for v in vols {
            for p in pixels(v) {
                for (m, x) in mean.iter_mut().zip(&p) {
                    *m += x;
                }
            }
        }
        mean /= n as f64;

        let mut cov = DMatrix::<f64>::zeros(channels, channels);
        for v in vols {
            for p in pixels(v) {
                let d =
                    DVector::from_iterator(channels, p.iter().zip(mean.iter()).map(|(x, m)| x - m));
                cov.syger(1.0, &d, &d, 1.0);
            }
        }
        cov.fill_upper_triangle_with_lower_triangle();
        cov /= n as f64;

        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..channels).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .total_cmp(&eig.eigenvalues[a])
                .then(a.cmp(&b))
        });
        let largest = eig.eigenvalues[order[0]].max(0.0);

        let mut components = DMatrix::<f64>::zeros(channels, 3);
        let mut eigenvalues = [0.0; 3];
        for (j, &k) in order.iter().take(3).enumerate() {
            let lambda = eig.eigenvalues[k];
            if largest <= 0.0 || lambda <= RANK_TOLERANCE * largest {
                continue;
            }
            let mut col = eig.eigenvectors.column(k).into_owned();
            // sign convention: the largest-magnitude entry is positive
            let pivot = col
                .iter()
                .copied()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)));
            if let Some((_, v)) = pivot {
                if v < 0.0 {
                    col.neg_mut();
                }
            }
            components.set_column(j, &col);
            eigenvalues[j] = lambda;
        }
        Ok(Self {
            mean,
            components,
            eigenvalues,
        })
    }

    /// Scores on the three components, one `[f64; 3]` per pixel in
    /// `(t, y, x)` order.
    pub fn project(&self, vol: &FeatureVolume) -> Result<Vec<[f64; 3]>> {
        if vol.shape().channels != self.mean.len() {
            return Err(Error::shape(format!(
                "expected {} channels, got {}",
                self.mean.len(),
                vol.shape().channels
            )));
        }
        Ok(pixels(vol)
            .map(|p| {
                let mut out = [0.0; 3];
                for (j, o) in out.iter_mut().enumerate() {
                    *o = p
                        .iter()
                        .zip(self.mean.iter())
                        .zip(self.components.column(j).iter())
                        .map(|((x, m), c)| (x - m) * c)
                        .sum();
                }
                out
            })
            .collect())
    }
}

fn to_frames(
    scores: &[[f64; 3]],
    lo: [f64; 3],
    hi: [f64; 3],
    frames: usize,
    h: usize,
    w: usize,
) -> Vec<RgbFrame> {
    let level = |v: f64, j: usize| -> u8 {
        let range = hi[j] - lo[j];
        if range <= 0.0 {
            0
        } else {
            ((v - lo[j]) / range * 255.0).round().clamp(0.0, 255.0) as u8
        }
    };
    scores
        .chunks(h * w)
        .take(frames)
        .map(|chunk| {
            let mut data = Vec::with_capacity(h * w * 3);
            for s in chunk {
                data.extend((0..3).map(|j| level(s[j], j)));
            }
            RgbFrame::new(w, h, data).expect("sized buffer")
        })
        .collect()
}

/// Projects both volumes onto a jointly fitted basis and maps each component
/// to one color channel with a shared min-max range, so colors are
/// comparable across the two outputs.
pub fn pca_rgb(a: &FeatureVolume, b: &FeatureVolume) -> Result<(Vec<RgbFrame>, Vec<RgbFrame>)> {
    let basis = PcaBasis::fit(&[a, b])?;
    let (sa, sb) = (basis.project(a)?, basis.project(b)?);
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for s in sa.iter().chain(&sb) {
        for j in 0..3 {
            lo[j] = lo[j].min(s[j]);
            hi[j] = hi[j].max(s[j]);
        }
    }
    let (ha, hb) = (a.shape(), b.shape());
    Ok((
        to_frames(&sa, lo, hi, ha.frames, ha.height, ha.width),
        to_frames(&sb, lo, hi, hb.frames, hb.height, hb.width),
    ))
}

/// Color of object `id` in the standard segmentation palette (bit-interleaved,
/// id 1 is dark red, 2 dark green, 3 olive, ...).
pub fn palette_color(id: u8) -> [u8; 3] {
    let mut c = [0u8; 3];
    let mut v = id;
    for shift in (0..8).rev() {
        for (ch, out) in c.iter_mut().enumerate() {
            *out |= ((v >> ch) & 1) << shift;
        }
        v >>= 3;
        if v == 0 {
            break;
        }
    }
    c
}

/// Blends `alpha * palette(id) + (1 - alpha) * frame` on every non-background
/// pixel.
pub fn overlay_masks(frame: &RgbFrame, ids: &[u8], alpha: f64) -> Result<RgbFrame> {
    if ids.len() != frame.width * frame.height {
        return Err(Error::shape(format!(
            "mask has {} pixels, frame {}x{}",
            ids.len(),
            frame.height,
            frame.width
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha {alpha} outside [0, 1]")));
    }
    let mut out = frame.clone();
    for (p, &id) in ids.iter().enumerate() {
        if id == 0 {
            continue;
        }
        let (y, x) = (p / frame.width, p % frame.width);
        let src = frame.pixel(y, x);
        let col = palette_color(id);
        let mut px = [0u8; 3];
        for c in 0..3 {
            px[c] = (alpha * col[c] as f64 + (1.0 - alpha) * src[c] as f64).round() as u8;
        }
        out.set_pixel(y, x, px);
    }
    Ok(out)
}
