use std::collections::VecDeque;

use super::LabelFrame;
use crate::tensorio::FeatureFrame;

/// A reference frame: its features and its (given or predicted) soft labels.
#[derive(Debug, Clone)]
pub struct RefEntry {
    /// Zero-based frame index in the video.
    pub frame_index: usize,
    pub features: FeatureFrame,
    pub labels: LabelFrame,
}

/// Pinned first frame plus a FIFO of the `max_context` most recent frames.
///
/// Iteration order is insertion order; the propagator relies on it for
/// breaking ties between equally similar candidates.
#[derive(Debug, Clone)]
pub struct ReferenceQueue {
    entries: VecDeque<RefEntry>,
    max_context: usize,
    pin_first: bool,
}

impl ReferenceQueue {
    pub fn new(max_context: usize, pin_first: bool) -> Self {
        Self {
            entries: VecDeque::with_capacity(max_context + 1),
            max_context,
            pin_first,
        }
    }

    pub fn push(&mut self, entry: RefEntry) {
        self.entries.push_back(entry);
        if self.pin_first {
            while self.entries.len() - 1 > self.max_context {
                // entries[0] is the pinned first frame
                self.entries.remove(1);
            }
        } else {
            while self.entries.len() > self.max_context + 1 {
                self.entries.pop_front();
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &RefEntry> {
        self.entries.iter()
    }

    pub fn get(&self, i: usize) -> Option<&RefEntry> {
        self.entries.get(i)
    }

    pub fn frame_indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.frame_index).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(i: usize) -> RefEntry {
        RefEntry {
            frame_index: i,
            features: FeatureFrame::new(1, 1, 1, vec![0.0]).unwrap(),
            labels: LabelFrame::new(1, 1, 2, vec![1.0, 0.0]).unwrap(),
        }
    }

    #[test]
    fn pinned_first_survives_fifo() {
        let mut q = ReferenceQueue::new(3, true);
        for i in 0..8 {
            q.push(entry(i));
        }
        assert_eq!(q.frame_indices(), vec![0, 5, 6, 7]);
    }

    #[test]
    fn unpinned_is_plain_fifo() {
        let mut q = ReferenceQueue::new(2, false);
        for i in 0..6 {
            q.push(entry(i));
        }
        assert_eq!(q.frame_indices(), vec![3, 4, 5]);
    }

    #[test]
    fn zero_context_keeps_only_first() {
        let mut q = ReferenceQueue::new(0, true);
        for i in 0..4 {
            q.push(entry(i));
        }
        assert_eq!(q.frame_indices(), vec![0]);
        let mut q = ReferenceQueue::new(0, false);
        for i in 0..4 {
            q.push(entry(i));
        }
        assert_eq!(q.frame_indices(), vec![3]);
    }
}
