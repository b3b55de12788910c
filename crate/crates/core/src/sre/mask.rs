//! Span masking over frame sequences: every frame is independently a span
//! start with probability p, spans cover min(M, T - start) frames, overlaps
//! union. If nothing gets selected one span is forced, so a pretraining step
//! never sees an empty mask.

use crate::error::{Error, Result};
use crate::rng::SplitRng;

#[derive(Debug, Clone)]
pub struct MaskSpec {
    pub masked: Vec<bool>,
}

impl MaskSpec {
    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }
}

pub fn sample_mask(t: usize, p: f64, m: usize, rng: &mut SplitRng) -> Result<MaskSpec> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::param(format!("mask probability {p} outside [0, 1]")));
    }
    if m < 1 || m > t {
        return Err(Error::param(format!(
            "mask span {m} outside [1, {t}] for {t} frames"
        )));
    }
    let mut masked = vec![false; t];
    let mut any = false;
    for start in 0..t {
        if rng.bool_with(p) {
            any = true;
            for f in masked.iter_mut().skip(start).take(m) {
                *f = true;
            }
        }
    }
    if !any {
        let start = rng.below(t - m + 1);
        for f in masked.iter_mut().skip(start).take(m) {
            *f = true;
        }
    }
    Ok(MaskSpec { masked })
}

/// Flatten per-item masks into the [B*T] row flags the graph ops consume.
pub fn flatten(masks: &[MaskSpec]) -> Vec<bool> {
    masks.iter().flat_map(|m| m.masked.iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p_zero_forces_exactly_one_span() {
        let mut rng = SplitRng::seed_from(3);
        for _ in 0..100 {
            let m = sample_mask(20, 0.0, 4, &mut rng).unwrap();
            assert_eq!(m.count(), 4);
            // contiguity: masked frames form one run
            let first = m.masked.iter().position(|&x| x).unwrap();
            assert!(m.masked[first..first + 4].iter().all(|&x| x));
        }
    }

    #[test]
    fn p_one_masks_everything() {
        let mut rng = SplitRng::seed_from(3);
        let m = sample_mask(15, 1.0, 3, &mut rng).unwrap();
        assert_eq!(m.count(), 15);
    }

    #[test]
    fn invalid_parameters_rejected() {
        let mut rng = SplitRng::seed_from(1);
        assert!(sample_mask(10, -0.1, 2, &mut rng).is_err());
        assert!(sample_mask(10, 1.1, 2, &mut rng).is_err());
        assert!(sample_mask(10, 0.5, 0, &mut rng).is_err());
        assert!(sample_mask(10, 0.5, 11, &mut rng).is_err());
    }

    #[test]
    fn mean_masked_fraction_matches_union_bound() {
        // Interior frames are masked iff any of the previous M starts fired:
        // P = 1 - (1-p)^M. Monte-Carlo over 10^4 draws, 3-sigma band.
        let (t, p, m) = (200usize, 0.065f64, 4usize);
        let expect = 1.0 - (1.0 - p).powi(m as i32);
        let draws = 10_000;
        let mut rng = SplitRng::seed_from(99);
        let interior = (m - 1)..t; // frames with a full window of starts
        let mut fractions = Vec::with_capacity(draws);
        for _ in 0..draws {
            let spec = sample_mask(t, p, m, &mut rng).unwrap();
            let cnt = interior
                .clone()
                .filter(|&i| spec.masked[i])
                .count();
            fractions.push(cnt as f64 / interior.len() as f64);
        }
        let mean: f64 = fractions.iter().sum::<f64>() / draws as f64;
        let var: f64 =
            fractions.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>() / draws as f64;
        let sigma_mean = (var / draws as f64).sqrt();
        assert!(
            (mean - expect).abs() <= 3.0 * sigma_mean.max(1e-4),
            "mean {mean} vs expected {expect} (3s = {})",
            3.0 * sigma_mean
        );
    }
}
