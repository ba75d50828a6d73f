//! Input builders shared by the criterion benchmarks.

use labelprop_core::propagator::{downsample_labels, RefEntry};
use labelprop_core::{FeatureFrame, PropagationConfig, ReferenceQueue};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A query frame and a full reference queue of random unit-norm features.
pub struct PropagationCase {
    pub query: FeatureFrame,
    pub queue: ReferenceQueue,
    pub config: PropagationConfig,
}

fn unit_frame(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureFrame {
    let mut data = Vec::with_capacity(h * w * c);
    for _ in 0..h * w {
        let v: Vec<f32> = (0..c).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
        data.extend(v.iter().map(|x| x / n));
    }
    FeatureFrame::new(h, w, c, data).expect("sized buffer")
}

pub fn propagation_case(
    seed: u64,
    size: usize,
    channels: usize,
    config: PropagationConfig,
) -> PropagationCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queue = ReferenceQueue::new(config.max_context, config.pin_first);
    for t in 0..=config.max_context {
        let ids: Vec<u8> = (0..size * size).map(|_| rng.random_range(0..3u8)).collect();
        let labels = downsample_labels(&ids, size, size, 2, size, size).expect("valid ids");
        queue.push(RefEntry {
            frame_index: t,
            features: unit_frame(&mut rng, size, size, channels),
            labels,
        });
    }
    PropagationCase {
        query: unit_frame(&mut rng, size, size, channels),
        queue,
        config,
    }
}
