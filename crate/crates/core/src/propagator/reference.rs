//! Exhaustive implementation of the propagation step, used as a test oracle
//! for [`super::predict_frame`]. It enumerates every reference pixel, keeps
//! those inside the window, fully sorts them, and aggregates the head of the
//! list. Quadratic in the frame size; meant for grids of a few dozen pixels.

use std::cmp::Ordering;

use super::{check_inputs, LabelFrame, PropagationConfig, ReferenceQueue, TopKMode};
use crate::error::Result;
use crate::tensorio::FeatureFrame;

#[derive(Debug, Clone, Copy)]
struct Candidate {
    score: f64,
    reference: usize,
    row: usize,
    col: usize,
}

fn order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.reference.cmp(&b.reference))
        .then(a.row.cmp(&b.row))
        .then(a.col.cmp(&b.col))
}

pub fn reference_predict_frame(
    query: &FeatureFrame,
    queue: &ReferenceQueue,
    cfg: &PropagationConfig,
) -> Result<LabelFrame> {
    let classes = check_inputs(query, queue, cfg)?;
    let (h, w, r) = (query.height, query.width, cfg.radius as i64);
    let mut data = Vec::with_capacity(h * w * classes);

    for y in 0..h {
        for x in 0..w {
            let q = query.pixel(y, x);
            let mut all = Vec::new();
            for (ri, entry) in queue.iter().enumerate() {
                for yy in 0..h {
                    for xx in 0..w {
                        if (yy as i64 - y as i64).abs() > r || (xx as i64 - x as i64).abs() > r {
                            continue;
                        }
                        let score = q
                            .iter()
                            .zip(entry.features.pixel(yy, xx))
                            .fold(0.0f64, |acc, (a, b)| acc + *a as f64 * *b as f64);
                        all.push(Candidate {
                            score,
                            reference: ri,
                            row: yy,
                            col: xx,
                        });
                    }
                }
            }

            let selected: Vec<Candidate> = match cfg.topk_mode {
                TopKMode::Global => {
                    all.sort_by(order);
                    all.into_iter().take(cfg.top_k).collect()
                }
                TopKMode::PerReference => {
                    let mut keep = Vec::new();
                    for ri in 0..queue.len() {
                        let mut mine: Vec<Candidate> =
                            all.iter().copied().filter(|c| c.reference == ri).collect();
                        mine.sort_by(order);
                        keep.extend(mine.into_iter().take(cfg.top_k));
                    }
                    keep
                }
            };

            let s_max = selected
                .iter()
                .map(|c| c.score)
                .fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = selected
                .iter()
                .map(|c| ((c.score - s_max) / cfg.temperature).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            for k in 0..classes {
                let v: f64 = selected
                    .iter()
                    .zip(&weights)
                    .map(|(c, wt)| {
                        wt * queue.get(c.reference).unwrap().labels.pixel(c.row, c.col)[k] as f64
                    })
                    .sum();
                data.push((v / total) as f32);
            }
        }
    }
    LabelFrame::new(h, w, classes, data)
}
