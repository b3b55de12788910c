//! Cycling mini-batch loader. Reshuffles at each epoch boundary with its own
//! seeded stream and never signals end-of-data: the training loop advances by
//! global step count, not epochs.

use super::{build_batch, Batch, LabeledUtterance, TaskId, WavClip};
use crate::error::{Error, Result};
use crate::rng::SplitRng;

/// Random fixed-length view of a clip: a uniform contiguous slice when the
/// clip is longer, right-padded with zeros when shorter.
pub fn slice_utterance(clip: &WavClip, length_samples: usize, rng: &mut SplitRng) -> WavClip {
    let mut samples = vec![0.0; length_samples];
    slice_into(clip, length_samples, rng, &mut samples);
    WavClip {
        samples: std::sync::Arc::new(samples),
        sample_rate: clip.sample_rate,
        source_id: clip.source_id.clone(),
    }
}

/// `slice_utterance` writing into a caller-provided buffer of the slice length.
fn slice_into(clip: &WavClip, length_samples: usize, rng: &mut SplitRng, out: &mut [f64]) {
    assert!(length_samples >= 1, "slice length must be >= 1");
    assert_eq!(out.len(), length_samples);
    let n = clip.len();
    if n >= length_samples {
        let start = if n == length_samples {
            0
        } else {
            rng.below(n - length_samples + 1)
        };
        out.copy_from_slice(&clip.samples[start..start + length_samples]);
    } else {
        out[..n].copy_from_slice(&clip.samples);
        out[n..].fill(0.0);
    }
}

pub struct BatchLoader {
    items: Vec<LabeledUtterance>,
    task: TaskId,
    sample_len: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: SplitRng,
}

impl BatchLoader {
    pub fn new(
        items: Vec<LabeledUtterance>,
        task: TaskId,
        sample_len: usize,
        rng: SplitRng,
    ) -> Result<BatchLoader> {
        if items.is_empty() {
            return Err(Error::contract("loader over an empty dataset"));
        }
        let order = (0..items.len()).collect();
        Ok(BatchLoader {
            items,
            task,
            sample_len,
            order,
            cursor: 0,
            rng,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn task(&self) -> TaskId {
        self.task
    }

    /// Next mini-batch. Batches partition each epoch (the final one may be
    /// short); the order reshuffles at every epoch start.
    pub fn next_batch(&mut self, batch_size: usize) -> Batch {
        assert!(batch_size >= 1, "batch_size must be >= 1");
        if self.cursor == 0 {
            self.rng.shuffle(&mut self.order);
        }
        let take = batch_size.min(self.items.len() - self.cursor);
        let mut flat = vec![0.0; take * self.sample_len];
        let mut labels = Vec::with_capacity(take);
        for k in 0..take {
            let item = &self.items[self.order[self.cursor + k]];
            slice_into(
                &item.clip,
                self.sample_len,
                &mut self.rng,
                &mut flat[k * self.sample_len..(k + 1) * self.sample_len],
            );
            labels.push(item.label);
        }
        self.cursor += take;
        if self.cursor == self.items.len() {
            self.cursor = 0;
        }
        build_batch(flat, take, self.sample_len, labels, self.task)
            .expect("loader batch construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(n: usize, fill: f64) -> WavClip {
        WavClip::new(vec![fill; n], "t")
    }

    fn items(n: usize, len: usize) -> Vec<LabeledUtterance> {
        (0..n)
            .map(|i| LabeledUtterance {
                clip: clip(len, i as f64),
                task: TaskId::Kws,
                label: i,
            })
            .collect()
    }

    #[test]
    fn slice_equal_length_is_identity() {
        let mut rng = SplitRng::seed_from(1);
        let c = WavClip::new((0..100).map(|i| i as f64).collect(), "x");
        let s = slice_utterance(&c, 100, &mut rng);
        assert_eq!(s.samples, c.samples);
    }

    #[test]
    fn slice_shorter_pads_right() {
        let mut rng = SplitRng::seed_from(1);
        let c = WavClip::new(vec![1.0; 10], "x");
        let s = slice_utterance(&c, 16, &mut rng);
        assert_eq!(&s.samples[..10], &[1.0; 10]);
        assert_eq!(&s.samples[10..], &[0.0; 6]);
    }

    #[test]
    fn slice_starts_are_uniform() {
        // 48000-sample clip sliced to 32000: starts uniform on [0, 16000].
        let mut rng = SplitRng::seed_from(42);
        let c = WavClip::new((0..48_000).map(|i| i as f64).collect(), "x");
        let n = 10_000;
        let mut sum = 0.0;
        let mut hist = [0usize; 4];
        for _ in 0..n {
            let s = slice_utterance(&c, 32_000, &mut rng);
            let start = s.samples[0];
            assert!((0.0..=16_000.0).contains(&start));
            sum += start;
            hist[(start as usize * 4 / 16_001).min(3)] += 1;
        }
        let mean = sum / n as f64;
        // 3 sigma band around the uniform mean 8000 (sigma = 16000/sqrt(12)/sqrt(n))
        let sigma = 16_000.0 / 12f64.sqrt() / (n as f64).sqrt();
        assert!((mean - 8_000.0).abs() < 3.0 * sigma, "mean {mean}");
        for (i, &h) in hist.iter().enumerate() {
            let f = h as f64 / n as f64;
            assert!((f - 0.25).abs() < 0.02, "bucket {i}: {f}");
        }
    }

    #[test]
    fn epoch_partition_rule() {
        // 10 items, batch 4 -> 4, 4, 2, then a fresh shuffled epoch.
        let mut loader =
            BatchLoader::new(items(10, 8), TaskId::Kws, 8, SplitRng::seed_from(5)).unwrap();
        assert_eq!(loader.next_batch(4).size(), 4);
        assert_eq!(loader.next_batch(4).size(), 4);
        assert_eq!(loader.next_batch(4).size(), 2);
        assert_eq!(loader.next_batch(4).size(), 4);
    }

    #[test]
    fn one_epoch_covers_every_item_once() {
        let mut loader =
            BatchLoader::new(items(10, 8), TaskId::Kws, 8, SplitRng::seed_from(5)).unwrap();
        let mut seen = vec![0usize; 10];
        for _ in 0..3 {
            for l in loader.next_batch(4).labels {
                seen[l] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1), "{seen:?}");
    }

    #[test]
    fn equal_seeds_equal_streams() {
        let mk = || BatchLoader::new(items(7, 8), TaskId::Kws, 8, SplitRng::seed_from(9)).unwrap();
        let (mut a, mut b) = (mk(), mk());
        for _ in 0..10 {
            let (ba, bb) = (a.next_batch(3), b.next_batch(3));
            assert_eq!(ba.labels, bb.labels);
            assert_eq!(ba.inputs.data(), bb.inputs.data());
        }
    }

    #[test]
    fn empty_dataset_rejected_at_construction() {
        assert!(BatchLoader::new(Vec::new(), TaskId::Kws, 8, SplitRng::seed_from(1)).is_err());
    }
}
