//! Region similarity (J, mask IoU) and contour accuracy (F, boundary
//! F-measure at a pixel tolerance), averaged per object over frames 2..N.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensorio::MaskSequence;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "mask {height}x{width} with {} pixels",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    /// Pixels of `ids` equal to `object`.
    pub fn from_ids(ids: &[u8], height: usize, width: usize, object: u8) -> Self {
        Self {
            height,
            width,
            data: ids.iter().map(|&v| v == object).collect(),
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    /// Foreground pixels with at least one 4-neighbour that is background or
    /// outside the image.
    pub fn boundary(&self) -> BinaryMask {
        let (h, w) = (self.height, self.width);
        let mut out = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                if !self.get(y, x) {
                    continue;
                }
                let edge = y == 0
                    || x == 0
                    || y + 1 == h
                    || x + 1 == w
                    || !self.get(y - 1, x)
                    || !self.get(y + 1, x)
                    || !self.get(y, x - 1)
                    || !self.get(y, x + 1);
                out[y * w + x] = edge;
            }
        }
        BinaryMask {
            height: h,
            width: w,
            data: out,
        }
    }

    /// Dilation by a `(2r+1)^2` square, i.e. every pixel within Chebyshev
    /// distance `r` of the mask.
    pub fn dilate(&self, r: usize) -> BinaryMask {
        let (h, w) = (self.height, self.width);
        let mut rows = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let lo = x.saturating_sub(r);
                let hi = (x + r).min(w - 1);
                rows[y * w + x] = (lo..=hi).any(|xx| self.data[y * w + xx]);
            }
        }
        let mut out = vec![false; h * w];
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(h - 1);
            for x in 0..w {
                out[y * w + x] = (lo..=hi).any(|yy| rows[yy * w + x]);
            }
        }
        BinaryMask {
            height: h,
            width: w,
            data: out,
        }
    }
}

fn same_dims(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape(format!(
            "mask dims differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// Intersection over union; 1 when both masks are empty.
pub fn region_similarity(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    same_dims(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, g) in pred.data.iter().zip(&gt.data) {
        inter += (*p && *g) as usize;
        union += (*p || *g) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// `max(1, round(0.008 * diagonal))`.
pub fn default_boundary_tolerance(height: usize, width: usize) -> usize {
    let diag = ((height * height + width * width) as f64).sqrt();
    ((0.008 * diag).round() as usize).max(1)
}

/// Boundary F-measure with matches counted within Chebyshev distance `tol`.
pub fn boundary_f(pred: &BinaryMask, gt: &BinaryMask, tol: usize) -> Result<f64> {
    same_dims(pred, gt)?;
    let pb = pred.boundary();
    let gb = gt.boundary();
    let (np, ng) = (pb.count(), gb.count());
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let gd = gb.dilate(tol);
    let pd = pb.dilate(tol);
    let matched_p = pb
        .data
        .iter()
        .zip(&gd.data)
        .filter(|(b, d)| **b && **d)
        .count();
    let matched_g = gb
        .data
        .iter()
        .zip(&pd.data)
        .filter(|(b, d)| **b && **d)
        .count();
    let precision = matched_p as f64 / np as f64;
    let recall = matched_g as f64 / ng as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameScore {
    pub object: usize,
    /// 1-based frame number.
    pub frame: usize,
    pub j: f64,
    pub f: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub scores: Vec<FrameScore>,
    /// Per-object means over frames 2..N, indexed by object id - 1.
    pub object_j: Vec<f64>,
    pub object_f: Vec<f64>,
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf_mean: f64,
}

impl EvalReport {
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Jm={:.6}", self.j_mean);
        let _ = writeln!(s, "Fm={:.6}", self.f_mean);
        let _ = writeln!(s, "JFm={:.6}", self.jf_mean);
        let _ = writeln!(s, "objects={}", self.object_j.len());
        let _ = writeln!(
            s,
            "frames_scored={}",
            self.scores.len() / self.object_j.len().max(1)
        );
        for (i, (j, f)) in self.object_j.iter().zip(&self.object_f).enumerate() {
            let _ = writeln!(s, "object{}_J={j:.6}", i + 1);
            let _ = writeln!(s, "object{}_F={f:.6}", i + 1);
        }
        s
    }

    pub const CSV_HEADER: &'static str = "video,object,frame,J,F";

    /// One CSV row per (object, frame), without header.
    pub fn csv_rows(&self, video: &str) -> String {
        self.scores
            .iter()
            .map(|s| format!("{video},{},{},{:.6},{:.6}\n", s.object, s.frame, s.j, s.f))
            .collect()
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Scores predictions against ground truth. Frame 1 is excluded because it
/// is given to the tracker; with a single frame nothing is scored and all
/// means are 1.
pub fn evaluate_sequence(preds: &MaskSequence, gts: &MaskSequence) -> Result<EvalReport> {
    if preds.num_objects != gts.num_objects {
        return Err(Error::config(format!(
            "predictions declare {} objects, ground truth {}",
            preds.num_objects, gts.num_objects
        )));
    }
    if (preds.frames, preds.height, preds.width) != (gts.frames, gts.height, gts.width) {
        return Err(Error::shape(format!(
            "prediction dims {}x{}x{} differ from ground truth {}x{}x{}",
            preds.frames, preds.height, preds.width, gts.frames, gts.height, gts.width
        )));
    }
    let (h, w) = (gts.height, gts.width);
    let tol = default_boundary_tolerance(h, w);
    let mut scores = Vec::with_capacity(gts.num_objects * gts.frames.saturating_sub(1));
    for object in 1..=gts.num_objects {
        for t in 1..gts.frames {
            let p = BinaryMask::from_ids(preds.frame(t), h, w, object as u8);
            let g = BinaryMask::from_ids(gts.frame(t), h, w, object as u8);
            scores.push(FrameScore {
                object,
                frame: t + 1,
                j: region_similarity(&p, &g)?,
                f: boundary_f(&p, &g, tol)?,
            });
        }
    }
    let per_object = |pick: fn(&FrameScore) -> f64| -> Vec<f64> {
        (1..=gts.num_objects)
            .map(|o| mean(scores.iter().filter(|s| s.object == o).map(pick)).unwrap_or(1.0))
            .collect()
    };
    let object_j = per_object(|s| s.j);
    let object_f = per_object(|s| s.f);
    let j_mean = mean(object_j.iter().copied()).unwrap_or(1.0);
    let f_mean = mean(object_f.iter().copied()).unwrap_or(1.0);
    Ok(EvalReport {
        scores,
        object_j,
        object_f,
        j_mean,
        f_mean,
        jf_mean: (j_mean + f_mean) / 2.0,
    })
}
