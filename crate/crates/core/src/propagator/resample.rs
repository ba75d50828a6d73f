use super::LabelFrame;
use crate::error::{Error, Result};

/// Overlap weights of each target cell with the source cells it covers,
/// normalized to sum to one.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|s| {
                    let overlap = (hi.min((s + 1) as f64) - lo.max(s as f64)).max(0.0);
                    (overlap > 0.0).then_some((s, overlap / scale))
                })
                .collect()
        })
        .collect()
}

/// One-hot encodes an `H x W` id grid and area-averages it down to `h x w`.
pub fn downsample_labels(
    ids: &[u8],
    height: usize,
    width: usize,
    num_objects: usize,
    target_h: usize,
    target_w: usize,
) -> Result<LabelFrame> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::shape("label target dims must be positive"));
    }
    if target_h > height || target_w > width {
        return Err(Error::shape(format!(
            "cannot downsample {height}x{width} labels to larger grid {target_h}x{target_w}"
        )));
    }
    if ids.len() != height * width {
        return Err(Error::shape(format!(
            "id grid has {} values, expected {}",
            ids.len(),
            height * width
        )));
    }
    let classes = num_objects + 1;
    if let Some(bad) = ids.iter().find(|&&id| id as usize >= classes) {
        return Err(Error::data(format!(
            "object id {bad} exceeds num_objects {num_objects}"
        )));
    }

    let rows = area_weights(height, target_h);
    let cols = area_weights(width, target_w);

    // horizontal pass: H x w x classes
    let mut horiz = vec![0.0f64; height * target_w * classes];
    for y in 0..height {
        let src = &ids[y * width..(y + 1) * width];
        for (tx, weights) in cols.iter().enumerate() {
            let cell = &mut horiz[(y * target_w + tx) * classes..(y * target_w + tx + 1) * classes];
            for &(sx, wgt) in weights {
                cell[src[sx] as usize] += wgt;
            }
        }
    }

    let mut data = vec![0.0f32; target_h * target_w * classes];
    let mut acc = vec![0.0f64; classes];
    for (ty, weights) in rows.iter().enumerate() {
        for tx in 0..target_w {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for &(sy, wgt) in weights {
                let cell =
                    &horiz[(sy * target_w + tx) * classes..(sy * target_w + tx + 1) * classes];
                for (a, v) in acc.iter_mut().zip(cell) {
                    *a += wgt * v;
                }
            }
            let total: f64 = acc.iter().sum();
            let out = &mut data[(ty * target_w + tx) * classes..(ty * target_w + tx + 1) * classes];
            for (o, a) in out.iter_mut().zip(&acc) {
                *o = (a / total) as f32;
            }
        }
    }
    LabelFrame::new(target_h, target_w, classes, data)
}

/// Bilinear upsampling (half-pixel centers, clamped borders) followed by a
/// per-pixel argmax. Ties resolve to the lowest class id.
pub fn upsample_argmax(labels: &LabelFrame, height: usize, width: usize) -> Vec<u8> {
    let (h, w, classes) = (labels.height, labels.width, labels.classes);
    let axis = |dst: usize, src: usize| -> Vec<(usize, usize, f64)> {
        (0..dst)
            .map(|i| {
                let pos =
                    ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let ys = axis(height, h);
    let xs = axis(width, w);
    let mut out = vec![0u8; height * width];
    let mut probs = vec![0.0f64; classes];
    for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            let (p00, p01, p10, p11) = (
                labels.pixel(y0, x0),
                labels.pixel(y0, x1),
                labels.pixel(y1, x0),
                labels.pixel(y1, x1),
            );
            for k in 0..classes {
                let top = p00[k] as f64 * (1.0 - fx) + p01[k] as f64 * fx;
                let bottom = p10[k] as f64 * (1.0 - fx) + p11[k] as f64 * fx;
                probs[k] = top * (1.0 - fy) + bottom * fy;
            }
            let mut best = 0;
            for k in 1..classes {
                if probs[k] > probs[best] {
                    best = k;
                }
            }
            out[y * width + x] = best as u8;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resolution_is_one_hot() {
        let ids = [0u8, 1, 2, 1, 0, 2];
        let lf = downsample_labels(&ids, 2, 3, 2, 2, 3).unwrap();
        for (p, id) in ids.iter().enumerate() {
            let px = lf.pixel(p / 3, p % 3);
            for (k, v) in px.iter().enumerate() {
                assert_eq!(*v, if k == *id as usize { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn constant_mask() {
        let lf = downsample_labels(&[1u8; 36], 6, 6, 1, 3, 2).unwrap();
        for y in 0..3 {
            for x in 0..2 {
                assert_eq!(lf.pixel(y, x), &[0.0, 1.0]);
            }
        }
    }

    #[test]
    fn checkerboard_halves() {
        let ids: Vec<u8> = (0..64).map(|i| ((i / 8 + i % 8) % 2) as u8).collect();
        let lf = downsample_labels(&ids, 8, 8, 1, 4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(lf.pixel(y, x), &[0.5, 0.5]);
            }
        }
    }

    #[test]
    fn fractional_ratio_stays_on_simplex() {
        let ids: Vec<u8> = (0..7 * 5).map(|i| (i % 3) as u8).collect();
        let lf = downsample_labels(&ids, 7, 5, 2, 3, 2).unwrap();
        for y in 0..3 {
            for x in 0..2 {
                let s: f32 = lf.pixel(y, x).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bad_targets() {
        assert!(matches!(
            downsample_labels(&[0; 4], 2, 2, 1, 0, 1),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            downsample_labels(&[0; 4], 2, 2, 1, 3, 2),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn upsample_identity_and_ties() {
        let ids = [0u8, 1, 2, 2];
        let lf = downsample_labels(&ids, 2, 2, 2, 2, 2).unwrap();
        assert_eq!(upsample_argmax(&lf, 2, 2), ids.to_vec());
        let tie = LabelFrame::new(1, 1, 3, vec![0.0, 0.5, 0.5]).unwrap();
        assert_eq!(upsample_argmax(&tie, 1, 1), vec![1]);
    }

    #[test]
    fn upsample_then_downsample_recovers_blocks() {
        let ids = [0u8, 1, 1, 0];
        let lf = downsample_labels(&ids, 2, 2, 1, 2, 2).unwrap();
        let up = upsample_argmax(&lf, 8, 8);
        // the four quadrants keep their label away from the blended seams
        assert_eq!(up[0], 0);
        assert_eq!(up[7], 1);
        assert_eq!(up[56], 1);
        assert_eq!(up[63], 0);
    }
}
