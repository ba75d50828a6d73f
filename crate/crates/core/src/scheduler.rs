//! Sliding-window clip planning for backbones with a bounded input length,
//! and stitching of per-clip feature volumes back into one video volume.

use crate::error::{Error, Result};
use crate::tensorio::{FeatureVolume, Shape4};

/// Inclusive, 1-based frame range `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipRange {
    pub start: usize,
    pub end: usize,
}

impl ClipRange {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start..=self.end).contains(&frame)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipPlan {
    pub frames: usize,
    pub window: usize,
    pub overlap: usize,
    pub clips: Vec<ClipRange>,
}

impl ClipPlan {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Number of clips given by the sliding-window formula
    /// `floor((N - L) / (L - l)) + 1`, before the tail-coverage rule.
    pub fn formula_count(frames: usize, window: usize, overlap: usize) -> usize {
        if frames <= window {
            1
        } else {
            (frames - window) / (window - overlap) + 1
        }
    }
}

/// Which clip's representation survives for frames covered more than once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OverlapPolicy {
    /// Earlier clip wins; frames already queued are skipped by later clips.
    #[default]
    FirstWriter,
    /// Later clip overwrites.
    LastWriter,
}

/// Splits `frames` frames into windows of `window` frames sharing `overlap`
/// frames between neighbours.
///
/// Regular clips start every `window - overlap` frames. When they leave a
/// tail uncovered, one end-aligned clip `[N - L + 1, N]` is appended.
pub fn plan_clips(frames: usize, window: usize, overlap: usize) -> Result<ClipPlan> {
    if frames == 0 {
        return Err(Error::config("video must have at least one frame"));
    }
    if window == 0 {
        return Err(Error::config("window length must be at least 1"));
    }
    if overlap >= window {
        return Err(Error::config(format!(
            "overlap {overlap} must be smaller than window {window}"
        )));
    }

    if frames <= window {
        return Ok(ClipPlan {
            frames,
            window,
            overlap,
            clips: vec![ClipRange {
                start: 1,
                end: frames,
            }],
        });
    }

    let stride = window - overlap;
    let count = ClipPlan::formula_count(frames, window, overlap);
    let mut clips: Vec<ClipRange> = (0..count)
        .map(|k| ClipRange {
            start: 1 + k * stride,
            end: window + k * stride,
        })
        .collect();
    if clips.last().map_or(0, |c| c.end) < frames {
        clips.push(ClipRange {
            start: frames - window + 1,
            end: frames,
        });
    }
    Ok(ClipPlan {
        frames,
        window,
        overlap,
        clips,
    })
}

/// Cuts a full-video volume into the clips of `plan`.
pub fn split_features(plan: &ClipPlan, volume: &FeatureVolume) -> Result<Vec<FeatureVolume>> {
    if volume.shape().frames != plan.frames {
        return Err(Error::shape(format!(
            "volume has {} frames, plan covers {}",
            volume.shape().frames,
            plan.frames
        )));
    }
    plan.clips
        .iter()
        .map(|c| volume.slice_frames(c.start - 1, c.len()))
        .collect()
}

/// Reassembles per-clip volumes into one volume of `plan.frames` frames,
/// keeping the earliest clip's representation for overlapped frames.
pub fn stitch_features(plan: &ClipPlan, clip_volumes: &[FeatureVolume]) -> Result<FeatureVolume> {
    stitch_features_with(plan, clip_volumes, OverlapPolicy::FirstWriter)
}

pub fn stitch_features_with(
    plan: &ClipPlan,
    clip_volumes: &[FeatureVolume],
    policy: OverlapPolicy,
) -> Result<FeatureVolume> {
    if clip_volumes.len() != plan.clips.len() {
        return Err(Error::shape(format!(
            "plan has {} clips but {} volumes were supplied",
            plan.clips.len(),
            clip_volumes.len()
        )));
    }
    let first = clip_volumes[0].shape();
    for (k, (clip, vol)) in plan.clips.iter().zip(clip_volumes).enumerate() {
        let s = vol.shape();
        if s.frames != clip.len() {
            return Err(Error::shape(format!(
                "clip {k} spans {} frames but its volume has {}",
                clip.len(),
                s.frames
            )));
        }
        if (s.channels, s.height, s.width) != (first.channels, first.height, first.width) {
            return Err(Error::shape(format!(
                "clip {k} has C/h/w {s:?}, expected {first:?}"
            )));
        }
    }

    let shape = Shape4 {
        frames: plan.frames,
        ..first
    };
    let frame_len = shape.frame_len();
    let mut data = vec![0.0f32; shape.len()];
    let mut written = vec![false; plan.frames];

    for (clip, vol) in plan.clips.iter().zip(clip_volumes) {
        for (offset, frame) in (clip.start..=clip.end).enumerate() {
            let t = frame - 1;
            if written[t] && policy == OverlapPolicy::FirstWriter {
                continue;
            }
            data[t * frame_len..(t + 1) * frame_len].copy_from_slice(vol.frame_data(offset));
            written[t] = true;
        }
    }
    if let Some(t) = written.iter().position(|w| !w) {
        return Err(Error::shape(format!(
            "frame {} is not covered by any clip",
            t + 1
        )));
    }

    let mut meta = clip_volumes[0].meta.clone();
    meta.clip_start_frame = 0;
    FeatureVolume::new(shape, data, meta)
}
