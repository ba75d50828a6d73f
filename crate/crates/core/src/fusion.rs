//! Weighted concatenation of L2-normalized motion and appearance streams.

use crate::error::{Error, Result};
use crate::tensorio::{FeatureKind, FeatureVolume, Shape4};

pub const DEFAULT_EPS: f64 = 1e-12;

/// Convex weight on the motion stream; the appearance stream gets `1 - λ`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct FusionWeight(f64);

impl FusionWeight {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::config(format!(
                "fusion weight must lie in [0, 1], got {lambda}"
            )));
        }
        Ok(Self(lambda))
    }

    pub fn motion(&self) -> f64 {
        self.0
    }

    pub fn appearance(&self) -> f64 {
        1.0 - self.0
    }
}

/// Which values share one L2 norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormAxis {
    /// One norm per `(t, y, x)` across channels.
    #[default]
    PerPixel,
    /// One norm per frame across all channels and pixels.
    PerFrame,
}

/// Divides each per-pixel channel vector by `max(norm, eps)`.
pub fn l2_normalize_channels(vol: &FeatureVolume, eps: f64) -> Result<FeatureVolume> {
    normalize_with(vol, eps, NormAxis::PerPixel)
}

pub fn normalize_with(vol: &FeatureVolume, eps: f64, axis: NormAxis) -> Result<FeatureVolume> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::config(format!("eps must be positive, got {eps}")));
    }
    let s = vol.shape();
    let mut out = vec![0.0f32; s.len()];
    write_scaled(vol, eps, axis, 1.0, s.channels, 0, &mut out)?;
    FeatureVolume::new(s, out, vol.meta.clone())
}

/// Writes `scale * normalize(vol)` into channels `offset..offset + C` of a
/// destination volume with `dst_channels` channels.
fn write_scaled(
    vol: &FeatureVolume,
    eps: f64,
    axis: NormAxis,
    scale: f64,
    dst_channels: usize,
    offset: usize,
    dst: &mut [f32],
) -> Result<()> {
    let s = vol.shape();
    let plane = s.plane_len();
    let src = vol.data();
    if let Some(bad) = src.iter().position(|v| !v.is_finite()) {
        return Err(Error::data(format!("non-finite input at flat index {bad}")));
    }
    for t in 0..s.frames {
        let frame = vol.frame_data(t);
        let dst_frame = &mut dst[t * dst_channels * plane..(t + 1) * dst_channels * plane];
        match axis {
            NormAxis::PerPixel => {
                for p in 0..plane {
                    let sq: f64 = (0..s.channels)
                        .map(|c| (frame[c * plane + p] as f64).powi(2))
                        .sum();
                    let k = scale / sq.sqrt().max(eps);
                    for c in 0..s.channels {
                        dst_frame[(offset + c) * plane + p] =
                            (frame[c * plane + p] as f64 * k) as f32;
                    }
                }
            }
            NormAxis::PerFrame => {
                let sq: f64 = frame.iter().map(|v| (*v as f64).powi(2)).sum();
                let k = scale / sq.sqrt().max(eps);
                for c in 0..s.channels {
                    for p in 0..plane {
                        dst_frame[(offset + c) * plane + p] =
                            (frame[c * plane + p] as f64 * k) as f32;
                    }
                }
            }
        }
    }
    Ok(())
}

/// `concat(λ · Rm/‖Rm‖, (1 − λ) · Ra/‖Ra‖)` along the channel axis.
pub fn fuse(
    motion: &FeatureVolume,
    appearance: &FeatureVolume,
    weight: FusionWeight,
) -> Result<FeatureVolume> {
    fuse_with(motion, appearance, weight, NormAxis::PerPixel, DEFAULT_EPS)
}

pub fn fuse_with(
    motion: &FeatureVolume,
    appearance: &FeatureVolume,
    weight: FusionWeight,
    axis: NormAxis,
    eps: f64,
) -> Result<FeatureVolume> {
    let (m, a) = (motion.shape(), appearance.shape());
    if (m.frames, m.height, m.width) != (a.frames, a.height, a.width) {
        return Err(Error::shape(format!(
            "motion {}x{}x{} and appearance {}x{}x{} disagree on T/h/w",
            m.frames, m.height, m.width, a.frames, a.height, a.width
        )));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::config(format!("eps must be positive, got {eps}")));
    }
    let shape = Shape4::new(m.frames, m.channels + a.channels, m.height, m.width);
    let mut out = vec![0.0f32; shape.len()];
    write_scaled(
        motion,
        eps,
        axis,
        weight.motion(),
        shape.channels,
        0,
        &mut out,
    )?;
    write_scaled(
        appearance,
        eps,
        axis,
        weight.appearance(),
        shape.channels,
        m.channels,
        &mut out,
    )?;

    let mut meta = motion.meta.clone();
    meta.feature_kind = FeatureKind::Fused;
    meta.extra
        .insert("fusion_weight".into(), weight.motion().into());
    FeatureVolume::new(shape, out, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorio::FeatureMeta;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape4, seed: u64) -> FeatureVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.len())
            .map(|_| rng.random_range(-3.0f32..3.0))
            .collect();
        FeatureVolume::new(shape, data, FeatureMeta::default()).unwrap()
    }

    fn pixel(vol: &FeatureVolume, t: usize, y: usize, x: usize) -> Vec<f64> {
        (0..vol.shape().channels)
            .map(|c| vol.get(t, c, y, x) as f64)
            .collect()
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn three_four_five() {
        let vol = FeatureVolume::new(
            Shape4::new(1, 2, 1, 1),
            vec![3.0, 4.0],
            FeatureMeta::default(),
        )
        .unwrap();
        let out = l2_normalize_channels(&vol, DEFAULT_EPS).unwrap();
        assert!((out.get(0, 0, 0, 0) - 0.6).abs() < 1e-7);
        assert!((out.get(0, 1, 0, 0) - 0.8).abs() < 1e-7);
    }

    #[test]
    fn zero_vector_stays_zero() {
        let vol = FeatureVolume::zeros(Shape4::new(1, 3, 2, 2), FeatureMeta::default()).unwrap();
        let out = l2_normalize_channels(&vol, DEFAULT_EPS).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bad_eps_and_weight() {
        let vol = FeatureVolume::zeros(Shape4::new(1, 1, 1, 1), FeatureMeta::default()).unwrap();
        assert!(matches!(
            l2_normalize_channels(&vol, 0.0),
            Err(Error::Config(_))
        ));
        assert!(FusionWeight::new(1.5).is_err());
        assert!(FusionWeight::new(-0.1).is_err());
    }

    #[test]
    fn boundary_weights_zero_a_half() {
        let m = random(Shape4::new(2, 3, 2, 2), 1);
        let a = random(Shape4::new(2, 5, 2, 2), 2);
        let all_motion = fuse(&m, &a, FusionWeight::new(1.0).unwrap()).unwrap();
        let all_app = fuse(&m, &a, FusionWeight::new(0.0).unwrap()).unwrap();
        assert_eq!(all_motion.shape().channels, 8);
        assert_eq!(all_motion.meta.feature_kind, FeatureKind::Fused);
        for t in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    for c in 3..8 {
                        assert_eq!(all_motion.get(t, c, y, x), 0.0);
                    }
                    for c in 0..3 {
                        assert_eq!(all_app.get(t, c, y, x), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn shape_mismatch() {
        let m = random(Shape4::new(2, 3, 2, 2), 1);
        let a = random(Shape4::new(2, 3, 2, 3), 2);
        assert!(matches!(
            fuse(&m, &a, FusionWeight::new(0.5).unwrap()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn per_frame_axis_normalizes_whole_frame() {
        let m = random(Shape4::new(2, 3, 2, 2), 9);
        let out = normalize_with(&m, DEFAULT_EPS, NormAxis::PerFrame).unwrap();
        for t in 0..2 {
            let n: f64 = out
                .frame_data(t)
                .iter()
                .map(|v| (*v as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn prop_unit_or_zero_norm(seed in any::<u64>()) {
            let vol = random(Shape4::new(2, 4, 3, 3), seed);
            let out = l2_normalize_channels(&vol, DEFAULT_EPS).unwrap();
            for t in 0..2 { for y in 0..3 { for x in 0..3 {
                let n = norm(&pixel(&out, t, y, x));
                prop_assert!(n == 0.0 || (n - 1.0).abs() <= 1e-6);
            }}}
        }

        #[test]
        fn prop_fused_norm_and_dot_decomposition(seed in any::<u64>(), lambda in 0.0f64..=1.0) {
            let m = random(Shape4::new(1, 3, 2, 2), seed);
            let a = random(Shape4::new(1, 4, 2, 2), seed ^ 0x5eed);
            let f = fuse(&m, &a, FusionWeight::new(lambda).unwrap()).unwrap();
            let expected_norm = (lambda * lambda + (1.0 - lambda).powi(2)).sqrt();
            let pix: Vec<(usize, usize)> = vec![(0, 0), (0, 1), (1, 0), (1, 1)];
            for &(y, x) in &pix {
                prop_assert!((norm(&pixel(&f, 0, y, x)) - expected_norm).abs() <= 1e-6);
            }
            let cos = |v: &FeatureVolume, i: (usize, usize), j: (usize, usize)| {
                let (p, q) = (pixel(v, 0, i.0, i.1), pixel(v, 0, j.0, j.1));
                p.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / (norm(&p) * norm(&q))
            };
            for &i in &pix { for &j in &pix {
                let (fi, fj) = (pixel(&f, 0, i.0, i.1), pixel(&f, 0, j.0, j.1));
                let dot: f64 = fi.iter().zip(&fj).map(|(a, b)| a * b).sum();
                let expected = lambda * lambda * cos(&m, i, j) + (1.0 - lambda).powi(2) * cos(&a, i, j);
                prop_assert!((dot - expected).abs() <= 1e-6);
            }}
        }

        #[test]
        fn prop_scale_homogeneous(seed in any::<u64>(), sa in 0.01f32..100.0, sb in 0.01f32..100.0) {
            let m = random(Shape4::new(1, 3, 2, 3), seed);
            let a = random(Shape4::new(1, 2, 2, 3), seed.wrapping_add(1));
            let w = FusionWeight::new(0.3).unwrap();
            let base = fuse(&m, &a, w).unwrap();
            let scaled = fuse(&m.map(|v| v * sa).unwrap(), &a.map(|v| v * sb).unwrap(), w).unwrap();
            for (x, y) in base.data().iter().zip(scaled.data()) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }
    }
}
