//! Evaluation: Top-1 accuracy for classification and trial-pair EER for
//! speaker verification, with cosine scoring over pooled embeddings.

use crate::data::{TrialPair, WavClip, SV_SAMPLES};
use crate::error::{Error, Result};
use crate::heads::TaskHead;
use crate::losses::cosine_of_slices;
use crate::sre::SREModel;
use crate::tensor::{Graph, Tensor};

/// Fraction of rows whose argmax equals the label; ties break toward the
/// lowest class index.
pub fn top1_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.shape().len() != 2 {
        return Err(Error::dim("top1_accuracy expects [N, n] logits"));
    }
    let (rows, n) = (logits.shape()[0], logits.shape()[1]);
    if rows == 0 || labels.len() != rows {
        return Err(Error::dim("top1_accuracy: label count mismatch"));
    }
    let mut hits = 0usize;
    for (row, &label) in logits.data().chunks_exact(n).zip(labels) {
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / rows as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct ScoredTrial {
    pub score: f64,
    pub same_speaker: bool,
}

/// Equal error rate of a scored trial set: the common value of FPR and FNR at
/// their crossing, linearly interpolated between adjacent distinct-score
/// thresholds ("accept as same speaker" means score >= threshold).
pub fn compute_eer(trials: &[ScoredTrial]) -> Result<f64> {
    let n_pos = trials.iter().filter(|t| t.same_speaker).count();
    let n_neg = trials.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::contract(
            "EER needs at least one positive and one negative trial",
        ));
    }
    for t in trials {
        if !t.score.is_finite() {
            return Err(Error::numeric("non-finite trial score"));
        }
    }
    // Sort ascending by score; sweep thresholds upward through the distinct
    // scores, maintaining counts of postives/negatives below the threshold.
    let mut sorted: Vec<&ScoredTrial> = trials.iter().collect();
    sorted.sort_by(|a, b| a.score.partial_cmp(&b.score).unwrap());

    // Operating points: threshold -inf (everything accepted), then threshold
    // = each distinct score.
    let mut points = Vec::with_capacity(sorted.len() + 2);
    points.push((1.0f64, 0.0f64)); // (FPR, FNR)
    let mut pos_below = 0usize;
    let mut neg_below = 0usize;
    let mut i = 0usize;
    while i < sorted.len() {
        let s = sorted[i].score;
        // at threshold s: rejected = strictly below s
        let fpr = (n_neg - neg_below) as f64 / n_neg as f64;
        let fnr = pos_below as f64 / n_pos as f64;
        points.push((fpr, fnr));
        // consume the tie group at s
        while i < sorted.len() && sorted[i].score == s {
            if sorted[i].same_speaker {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            i += 1;
        }
    }
    points.push((0.0, 1.0)); // threshold +inf: everything rejected

    for w in points.windows(2) {
        let (f0, m0) = w[0];
        let (f1, m1) = w[1];
        let d0 = f0 - m0;
        let d1 = f1 - m1;
        if d0 == 0.0 {
            return Ok(f0);
        }
        if d0 > 0.0 && d1 <= 0.0 {
            let s = d0 / (d0 - d1);
            return Ok(f0 + s * (f1 - f0));
        }
    }
    // D is monotone from 1 to -1, so a crossing always exists.
    unreachable!("FPR-FNR crossing must exist");
}

/// Split a clip into non-overlapping 2 s windows (the final partial window is
/// zero-padded); clips at or under 2 s yield a single padded window.
pub fn trial_windows(clip: &WavClip) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let n = clip.len();
    let mut start = 0usize;
    loop {
        let end = (start + SV_SAMPLES).min(n);
        let mut w = clip.samples[start..end].to_vec();
        w.resize(SV_SAMPLES, 0.0);
        out.push(w);
        start += SV_SAMPLES;
        if start >= n {
            break;
        }
    }
    out
}

/// Embed every referenced clip (mean over its 2 s windows) and score each
/// pair by cosine similarity. Evaluation mode: no masking, batch-norm running
/// statistics.
pub fn score_trial_pairs(
    model: &SREModel,
    head: &mut TaskHead,
    clips: &[WavClip],
    pairs: &[TrialPair],
    batch_size: usize,
) -> Result<Vec<ScoredTrial>> {
    let mut needed: Vec<usize> = pairs.iter().flat_map(|p| [p.a, p.b]).collect();
    needed.sort_unstable();
    needed.dedup();
    if let Some(&bad) = needed.iter().find(|&&i| i >= clips.len()) {
        return Err(Error::contract(format!(
            "trial pair references clip {bad} of {}",
            clips.len()
        )));
    }

    // Collect all windows of all clips, remembering ownership.
    let mut windows = Vec::new();
    let mut owner = Vec::new();
    for &ci in &needed {
        for w in trial_windows(&clips[ci]) {
            windows.push(w);
            owner.push(ci);
        }
    }
    let dim = head.output_dim();
    let mut sums: std::collections::HashMap<usize, (Vec<f64>, usize)> = needed
        .iter()
        .map(|&ci| (ci, (vec![0.0; dim], 0usize)))
        .collect();

    for chunk_start in (0..windows.len()).step_by(batch_size.max(1)) {
        let chunk_end = (chunk_start + batch_size.max(1)).min(windows.len());
        let bsz = chunk_end - chunk_start;
        let mut flat = Vec::with_capacity(bsz * SV_SAMPLES);
        for w in &windows[chunk_start..chunk_end] {
            flat.extend_from_slice(w);
        }
        let wave = Tensor::from_vec(flat, &[bsz, SV_SAMPLES])?;
        let mut g = Graph::inference();
        let z = model.encode_frames(&mut g, &wave)?;
        let c = model.contextualize(&mut g, &z, None)?;
        let emb = head.forward(&mut g, &c, false)?;
        for (row, &ci) in emb.data().chunks_exact(dim).zip(&owner[chunk_start..chunk_end]) {
            let slot = sums.get_mut(&ci).expect("owner present");
            for (s, v) in slot.0.iter_mut().zip(row) {
                *s += v;
            }
            slot.1 += 1;
        }
    }

    let embeddings: std::collections::HashMap<usize, Vec<f64>> = sums
        .into_iter()
        .map(|(ci, (sum, count))| {
            let mean: Vec<f64> = sum.iter().map(|v| v / count as f64).collect();
            (ci, mean)
        })
        .collect();

    pairs
        .iter()
        .map(|p| {
            let score = cosine_of_slices(&embeddings[&p.a], &embeddings[&p.b])?;
            Ok(ScoredTrial {
                score,
                same_speaker: p.same_speaker,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitRng;

    fn trials(pos: &[f64], neg: &[f64]) -> Vec<ScoredTrial> {
        pos.iter()
            .map(|&s| ScoredTrial {
                score: s,
                same_speaker: true,
            })
            .chain(neg.iter().map(|&s| ScoredTrial {
                score: s,
                same_speaker: false,
            }))
            .collect()
    }

    /// Brute-force oracle: O(n^2) counting at every distinct threshold, then
    /// the same linear interpolation at the sign change.
    pub(super) fn eer_oracle(ts: &[ScoredTrial]) -> f64 {
        let n_pos = ts.iter().filter(|t| t.same_speaker).count();
        let n_neg = ts.len() - n_pos;
        let mut scores: Vec<f64> = ts.iter().map(|t| t.score).collect();
        scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
        scores.dedup();
        let at = |th: f64| -> (f64, f64) {
            let fp = ts.iter().filter(|t| !t.same_speaker && t.score >= th).count();
            let fnr = ts.iter().filter(|t| t.same_speaker && t.score < th).count();
            (fp as f64 / n_neg as f64, fnr as f64 / n_pos as f64)
        };
        let mut pts = vec![(1.0, 0.0)];
        for &s in &scores {
            pts.push(at(s));
        }
        pts.push((0.0, 1.0));
        for w in pts.windows(2) {
            let d0 = w[0].0 - w[0].1;
            let d1 = w[1].0 - w[1].1;
            if d0 == 0.0 {
                return w[0].0;
            }
            if d0 > 0.0 && d1 <= 0.0 {
                let s = d0 / (d0 - d1);
                return w[0].0 + s * (w[1].0 - w[0].0);
            }
        }
        unreachable!()
    }

    #[test]
    fn top1_examples() {
        let logits = Tensor::from_vec(
            vec![
                1.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, //
                0.0, 0.0, 1.0, //
                1.0, 0.0, 0.0,
            ],
            &[4, 3],
        )
        .unwrap();
        assert_eq!(top1_accuracy(&logits, &[0, 1, 2, 0]).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&logits, &[1, 2, 0, 1]).unwrap(), 0.0);
        assert_eq!(top1_accuracy(&logits, &[0, 1, 2, 1]).unwrap(), 0.75);
        // ties break to the lowest index
        let tied = Tensor::from_vec(vec![0.5, 0.5], &[1, 2]).unwrap();
        assert_eq!(top1_accuracy(&tied, &[0]).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&tied, &[1]).unwrap(), 0.0);
    }

    #[test]
    fn eer_spec_example_is_one_third() {
        let ts = trials(&[0.9, 0.8, 0.3], &[0.7, 0.2, 0.1]);
        assert!((compute_eer(&ts).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn eer_degenerate_cases() {
        let sep = trials(&[0.9, 0.8], &[0.2, 0.1]);
        assert_eq!(compute_eer(&sep).unwrap(), 0.0);
        let same = trials(&[0.1, 0.5, 0.9], &[0.1, 0.5, 0.9]);
        assert!((compute_eer(&same).unwrap() - 0.5).abs() < 1e-12);
        assert!(compute_eer(&trials(&[0.5], &[])).is_err());
    }

    #[test]
    fn eer_matches_brute_force_oracle_on_random_sets() {
        let mut rng = SplitRng::seed_from(77);
        for case in 0..200 {
            let n_pos = 1 + rng.below(30);
            let n_neg = 1 + rng.below(30);
            // occasionally quantize to force ties
            let quant = case % 3 == 0;
            let draw = |rng: &mut SplitRng| {
                let v = rng.range(-1.0, 1.0);
                if quant {
                    (v * 4.0).round() / 4.0
                } else {
                    v
                }
            };
            let pos: Vec<f64> = (0..n_pos).map(|_| draw(&mut rng)).collect();
            let neg: Vec<f64> = (0..n_neg).map(|_| draw(&mut rng)).collect();
            let ts = trials(&pos, &neg);
            let fast = compute_eer(&ts).unwrap();
            let slow = eer_oracle(&ts);
            assert!(
                (fast - slow).abs() < 1e-9,
                "case {case}: {fast} vs {slow} (pos {pos:?} neg {neg:?})"
            );
        }
    }

    #[test]
    fn eer_invariant_under_increasing_transform() {
        let mut rng = SplitRng::seed_from(5);
        let pos: Vec<f64> = (0..20).map(|_| rng.range(-1.0, 1.0)).collect();
        let neg: Vec<f64> = (0..25).map(|_| rng.range(-1.0, 1.0)).collect();
        let base = compute_eer(&trials(&pos, &neg)).unwrap();
        let mono = |v: f64| (3.0 * v).tanh() * 2.0 + 0.1 * v;
        let tp: Vec<f64> = pos.iter().map(|&v| mono(v)).collect();
        let tn: Vec<f64> = neg.iter().map(|&v| mono(v)).collect();
        let transformed = compute_eer(&trials(&tp, &tn)).unwrap();
        assert!((base - transformed).abs() < 1e-12);
    }

    #[test]
    fn eer_symmetric_under_label_swap_and_negation() {
        let mut rng = SplitRng::seed_from(6);
        let pos: Vec<f64> = (0..15).map(|_| rng.range(-1.0, 1.0)).collect();
        let neg: Vec<f64> = (0..10).map(|_| rng.range(-1.0, 1.0)).collect();
        let a = compute_eer(&trials(&pos, &neg)).unwrap();
        let np: Vec<f64> = neg.iter().map(|v| -v).collect();
        let nn: Vec<f64> = pos.iter().map(|v| -v).collect();
        let b = compute_eer(&trials(&np, &nn)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn trial_windows_pad_and_chunk() {
        let short = WavClip::new(vec![0.5; 10_000], "s");
        let w = trial_windows(&short);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].len(), SV_SAMPLES);
        assert_eq!(w[0][9_999], 0.5);
        assert_eq!(w[0][10_000], 0.0);

        let exact = WavClip::new(vec![0.1; SV_SAMPLES], "e");
        assert_eq!(trial_windows(&exact).len(), 1);

        let long = WavClip::new(vec![0.1; 48_000], "l");
        let w = trial_windows(&long);
        assert_eq!(w.len(), 2);
        assert_eq!(w[1][15_999], 0.1);
        assert_eq!(w[1][16_000], 0.0);
    }
}
