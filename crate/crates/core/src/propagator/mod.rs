//! Recurrent label propagation.
//!
//! For each query pixel the propagator scores every reference pixel inside a
//! square window of radius `r` (clipped at the borders) by the raw dot
//! product of their features, keeps the `K` best candidates across all
//! reference frames, and returns the temperature-softmax-weighted average of
//! their labels. The first frame is pinned in the reference queue; the rest
//! of the queue is a FIFO of the most recent predictions.
//!
//! Candidate order is total: higher score first, then earlier reference,
//! smaller row, smaller column. Every query pixel is computed independently,
//! so results are identical for any number of worker threads.

mod queue;
mod reference;
mod resample;

use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensorio::{FeatureFrame, FeatureVolume, MaskSequence};

pub use queue::{RefEntry, ReferenceQueue};
pub use reference::reference_predict_frame;
pub use resample::{downsample_labels, upsample_argmax};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TopKMode {
    /// One top-K over the candidates of all reference frames jointly.
    #[default]
    Global,
    /// Top-K inside each reference frame, one softmax over the union.
    PerReference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagationConfig {
    /// Half-size of the square search window, in feature pixels.
    pub radius: usize,
    pub top_k: usize,
    /// Softmax temperature applied to the retained similarities.
    pub temperature: f64,
    /// Number of previous frames kept besides the first frame.
    pub max_context: usize,
    pub pin_first: bool,
    pub topk_mode: TopKMode,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            radius: 15,
            top_k: 10,
            temperature: 0.2,
            max_context: 7,
            pin_first: true,
            topk_mode: TopKMode::Global,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::config("top_k must be at least 1"));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Soft labels of one frame, pixel-major (`h x w x classes`); class 0 is
/// background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelFrame {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub data: Vec<f32>,
}

pub type LabelField = Vec<LabelFrame>;

impl LabelFrame {
    pub fn new(height: usize, width: usize, classes: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || classes == 0 || data.len() != height * width * classes {
            return Err(Error::shape(format!(
                "label frame {height}x{width}x{classes} with {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
            data,
        })
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let start = (y * self.width + x) * self.classes;
        &self.data[start..start + self.classes]
    }

    /// Largest deviation of any pixel's class sum from one.
    pub fn simplex_error(&self) -> f64 {
        self.data
            .chunks_exact(self.classes)
            .map(|p| (p.iter().map(|v| *v as f64).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

#[inline(always)]
fn dot_fixed<const C: usize>(a: &[f32], b: &[f32]) -> f64 {
    let a: &[f32; C] = a.try_into().unwrap();
    let b: &[f32; C] = b.try_into().unwrap();
    let mut s = 0.0f64;
    for c in 0..C {
        s += a[c] as f64 * b[c] as f64;
    }
    s
}

#[inline(always)]
fn dot_dyn(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        s += *x as f64 * *y as f64;
    }
    s
}

/// Bounded list of the best candidates seen so far, sorted best-first.
///
/// Candidates must be offered in ascending (reference, row, col) order; a
/// newcomer then only displaces entries with a strictly lower score, which
/// realizes the total tie-break order without storing positions.
struct TopK {
    cap: usize,
    scores: Vec<f64>,
    slots: Vec<(u32, u32, u32)>,
}

impl TopK {
    fn new(cap: usize) -> Self {
        Self {
            cap,
            scores: Vec::with_capacity(cap + 1),
            slots: Vec::with_capacity(cap + 1),
        }
    }

    fn clear(&mut self) {
        self.scores.clear();
        self.slots.clear();
    }

    #[inline(always)]
    fn threshold(&self) -> f64 {
        if self.scores.len() < self.cap {
            f64::NEG_INFINITY
        } else {
            self.scores[self.cap - 1]
        }
    }

    #[inline]
    fn offer(&mut self, score: f64, slot: (u32, u32, u32)) {
        let mut pos = self.scores.len();
        while pos > 0 && self.scores[pos - 1] < score {
            pos -= 1;
        }
        if pos >= self.cap {
            return;
        }
        self.scores.insert(pos, score);
        self.slots.insert(pos, slot);
        if self.scores.len() > self.cap {
            self.scores.pop();
            self.slots.pop();
        }
    }
}

struct Window {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
}

impl Window {
    fn around(y: usize, x: usize, r: usize, h: usize, w: usize) -> Self {
        Self {
            y0: y.saturating_sub(r),
            y1: (y + r).min(h - 1),
            x0: x.saturating_sub(r),
            x1: (x + r).min(w - 1),
        }
    }
}

fn scan_reference(
    query: &[f32],
    features: &FeatureFrame,
    win: &Window,
    ref_index: u32,
    top: &mut TopK,
    dot: impl Fn(&[f32], &[f32]) -> f64,
) {
    let c = features.channels;
    let w = features.width;
    for yy in win.y0..=win.y1 {
        let row = &features.data[(yy * w + win.x0) * c..(yy * w + win.x1 + 1) * c];
        let mut threshold = top.threshold();
        for (i, cand) in row.chunks_exact(c).enumerate() {
            let s = dot(query, cand);
            if s > threshold {
                top.offer(s, (ref_index, yy as u32, (win.x0 + i) as u32));
                threshold = top.threshold();
            }
        }
    }
}

fn aggregate(
    selected: &[(f64, (u32, u32, u32))],
    queue: &ReferenceQueue,
    temperature: f64,
    out: &mut [f32],
) {
    let s_max = selected
        .iter()
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut acc = [0.0f64; 32];
    let mut heap_acc;
    let acc: &mut [f64] = if out.len() <= acc.len() {
        &mut acc[..out.len()]
    } else {
        heap_acc = vec![0.0f64; out.len()];
        &mut heap_acc
    };
    let mut total = 0.0f64;
    for &(s, (r, yy, xx)) in selected {
        let wgt = ((s - s_max) / temperature).exp();
        total += wgt;
        let lbl = queue
            .get(r as usize)
            .expect("selected reference exists")
            .labels
            .pixel(yy as usize, xx as usize);
        for (a, l) in acc.iter_mut().zip(lbl) {
            *a += wgt * *l as f64;
        }
    }
    for (o, a) in out.iter_mut().zip(acc.iter()) {
        *o = (a / total) as f32;
    }
}

fn predict_rows(
    query: &FeatureFrame,
    queue: &ReferenceQueue,
    cfg: &PropagationConfig,
    out: &mut [f32],
    classes: usize,
    dot: impl Fn(&[f32], &[f32]) -> f64 + Sync + Copy,
) {
    let (h, w) = (query.height, query.width);
    let row_len = w * classes;
    out.par_chunks_mut(row_len)
        .enumerate()
        .for_each(|(y, row_out)| {
            let per_ref = cfg.topk_mode == TopKMode::PerReference;
            let mut top = TopK::new(cfg.top_k);
            let mut selected: Vec<(f64, (u32, u32, u32))> =
                Vec::with_capacity(cfg.top_k * queue.len());
            for x in 0..w {
                let q = query.pixel(y, x);
                let win = Window::around(y, x, cfg.radius, h, w);
                selected.clear();
                top.clear();
                for (ri, entry) in queue.iter().enumerate() {
                    scan_reference(q, &entry.features, &win, ri as u32, &mut top, dot);
                    if per_ref {
                        selected.extend(top.scores.iter().copied().zip(top.slots.iter().copied()));
                        top.clear();
                    }
                }
                if !per_ref {
                    selected.extend(top.scores.iter().copied().zip(top.slots.iter().copied()));
                }
                aggregate(
                    &selected,
                    queue,
                    cfg.temperature,
                    &mut row_out[x * classes..(x + 1) * classes],
                );
            }
        });
}

pub(crate) fn check_inputs(
    query: &FeatureFrame,
    queue: &ReferenceQueue,
    cfg: &PropagationConfig,
) -> Result<usize> {
    cfg.validate()?;
    let first = queue
        .get(0)
        .ok_or_else(|| Error::shape("reference queue is empty"))?;
    let classes = first.labels.classes;
    for entry in queue.iter() {
        let f = &entry.features;
        if f.channels != query.channels {
            return Err(Error::shape(format!(
                "reference frame {} has {} channels, query has {}",
                entry.frame_index, f.channels, query.channels
            )));
        }
        if (f.height, f.width) != (query.height, query.width) {
            return Err(Error::shape(format!(
                "reference frame {} is {}x{}, query is {}x{}",
                entry.frame_index, f.height, f.width, query.height, query.width
            )));
        }
        let l = &entry.labels;
        if (l.height, l.width, l.classes) != (query.height, query.width, classes) {
            return Err(Error::shape(format!(
                "labels of reference frame {} do not match",
                entry.frame_index
            )));
        }
    }
    Ok(classes)
}

/// Predicts soft labels for one query frame from the reference queue.
pub fn predict_frame(
    query: &FeatureFrame,
    queue: &ReferenceQueue,
    cfg: &PropagationConfig,
) -> Result<LabelFrame> {
    let classes = check_inputs(query, queue, cfg)?;
    let mut out = vec![0.0f32; query.height * query.width * classes];
    match query.channels {
        4 => predict_rows(query, queue, cfg, &mut out, classes, dot_fixed::<4>),
        8 => predict_rows(query, queue, cfg, &mut out, classes, dot_fixed::<8>),
        _ => predict_rows(query, queue, cfg, &mut out, classes, dot_dyn),
    }
    LabelFrame::new(query.height, query.width, classes, out)
}

#[derive(Debug, Clone)]
pub struct PropagationOutput {
    /// Hard masks at the original resolution; frame 1 is the given mask.
    pub masks: MaskSequence,
    /// Soft labels at feature resolution for every frame.
    pub labels: LabelField,
    /// Wall-clock time spent on each propagated frame (frames 2..N).
    pub frame_times: Vec<Duration>,
}

impl PropagationOutput {
    /// `frame <t> <ms>` lines, 1-based frame numbers.
    pub fn timing_report(&self) -> String {
        self.frame_times
            .iter()
            .enumerate()
            .map(|(i, d)| format!("frame {} {:.3}\n", i + 2, d.as_secs_f64() * 1e3))
            .collect()
    }
}

/// Propagates the first-frame masks of `gt` through all frames of `features`.
///
/// Only frame 1 of `gt` is read; its size is the output resolution.
pub fn run(
    features: &FeatureVolume,
    gt: &MaskSequence,
    cfg: &PropagationConfig,
) -> Result<PropagationOutput> {
    cfg.validate()?;
    let shape = features.shape();
    let (height, width, num_objects) = (gt.height, gt.width, gt.num_objects);
    if shape.height > height || shape.width > width {
        return Err(Error::shape(format!(
            "feature grid {}x{} is larger than the {height}x{width} masks",
            shape.height, shape.width
        )));
    }
    let first = gt.frame(0);
    let first_labels =
        downsample_labels(first, height, width, num_objects, shape.height, shape.width)?;

    let mut queue = ReferenceQueue::new(cfg.max_context, cfg.pin_first);
    queue.push(RefEntry {
        frame_index: 0,
        features: features.frame(0),
        labels: first_labels.clone(),
    });

    let mut labels = Vec::with_capacity(shape.frames);
    labels.push(first_labels);
    let mut masks: Vec<Vec<u8>> = Vec::with_capacity(shape.frames);
    masks.push(first.to_vec());
    let mut frame_times = Vec::with_capacity(shape.frames.saturating_sub(1));

    for t in 1..shape.frames {
        let start = Instant::now();
        let query = features.frame(t);
        let predicted = predict_frame(&query, &queue, cfg)?;
        masks.push(upsample_argmax(&predicted, height, width));
        queue.push(RefEntry {
            frame_index: t,
            features: query,
            labels: predicted.clone(),
        });
        labels.push(predicted);
        frame_times.push(start.elapsed());
    }

    let mut out = MaskSequence::from_frames(&masks, height, width, num_objects)?;
    out.meta = gt.meta.clone();
    Ok(PropagationOutput {
        masks: out,
        labels,
        frame_times,
    })
}
