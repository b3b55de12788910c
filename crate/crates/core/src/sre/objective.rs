//! Self-supervised pretraining objective: InfoNCE over cosine similarities
//! between contextual vectors and quantized targets at masked positions, a
//! codebook diversity regularizer, and L2 weight decay.

use super::mask::{flatten, sample_mask, MaskSpec};
use super::{frame_count, SREModel};
use crate::error::{Error, Result};
use crate::rng::SplitRng;
use crate::tensor::{Graph, Tensor};

/// Contrastive loss over masked positions. Distractors are drawn uniformly
/// from the *other* masked timesteps of the same utterance: without
/// replacement when at least K others exist, with replacement otherwise.
/// Positions whose utterance has no other masked frame are skipped.
pub fn contrastive_loss(
    g: &mut Graph,
    c: &Tensor,
    q: &Tensor,
    masks: &[MaskSpec],
    k: usize,
    kappa: f64,
    rng: &mut SplitRng,
) -> Result<Tensor> {
    if c.shape().len() != 3 {
        return Err(Error::dim("contrastive_loss expects [B, T, d]"));
    }
    let (bsz, t) = (c.shape()[0], c.shape()[1]);
    if masks.len() != bsz {
        return Err(Error::dim("one mask per batch item required"));
    }
    let mut positions = Vec::new();
    let mut cands = Vec::new();
    for (bi, spec) in masks.iter().enumerate() {
        if spec.masked.len() != t {
            return Err(Error::dim(format!(
                "mask of {} frames for T = {t}",
                spec.masked.len()
            )));
        }
        let item_masked: Vec<usize> = (0..t).filter(|&ti| spec.masked[ti]).collect();
        for &ti in &item_masked {
            let others: Vec<usize> = item_masked.iter().copied().filter(|&o| o != ti).collect();
            if others.is_empty() {
                continue;
            }
            positions.push(bi * t + ti);
            cands.push(bi * t + ti); // candidate 0: the true target
            if others.len() >= k {
                // sample k distinct via partial Fisher-Yates
                let mut pool = others;
                for j in 0..k {
                    let pick = j + rng.below(pool.len() - j);
                    pool.swap(j, pick);
                    cands.push(bi * t + pool[j]);
                }
            } else {
                for _ in 0..k {
                    cands.push(bi * t + others[rng.below(others.len())]);
                }
            }
        }
    }
    if positions.is_empty() {
        return Err(Error::contract(
            "contrastive_loss: no masked frames with distractor candidates",
        ));
    }
    g.info_nce(c, q, &positions, &cands, k + 1, kappa)
}

/// Diversity penalty (G*V - sum_g exp H(p_bar_g)) / (G*V) over soft code
/// probabilities of shape [N, G, V]; 0 at uniform usage, (GV - G)/(GV) at
/// total collapse.
pub fn diversity_loss(g: &mut Graph, code_probs: &Tensor) -> Result<Tensor> {
    if code_probs.shape().len() != 3 {
        return Err(Error::dim("diversity_loss expects [N, G, V] probabilities"));
    }
    let (n, groups, v) = (
        code_probs.shape()[0],
        code_probs.shape()[1],
        code_probs.shape()[2],
    );
    let mut mean_rows = Vec::with_capacity(groups);
    for gi in 0..groups {
        let slice = g.narrow(code_probs, 1, gi, 1)?;
        let flat = g.reshape(&slice, &[n, v])?;
        let mean = g.mean_axis(&flat, 0)?;
        mean_rows.push(g.reshape(&mean, &[1, v])?);
    }
    let refs: Vec<&Tensor> = mean_rows.iter().collect();
    let pbar = g.concat(&refs, 0)?; // [G, V]
    let ent = g.entropy_rows(&pbar)?;
    let perp = g.exp(&ent)?;
    let total = g.sum_all(&perp)?;
    let gv = (groups * v) as f64;
    let negated = g.neg(&total)?;
    let shifted = g.add_scalar(&negated, gv)?;
    g.mul_scalar(&shifted, 1.0 / gv)
}

/// Mean codebook perplexity exp(H(p_bar_g)) from soft probabilities [N, G, V];
/// plain diagnostics, no graph involvement.
pub fn perplexity_per_codebook(soft: &Tensor) -> Vec<f64> {
    let (n, groups, v) = (soft.shape()[0], soft.shape()[1], soft.shape()[2]);
    let data = soft.data();
    (0..groups)
        .map(|gi| {
            let mut pbar = vec![0.0; v];
            for row in 0..n {
                let base = (row * groups + gi) * v;
                for j in 0..v {
                    pbar[j] += data[base + j];
                }
            }
            let h: f64 = pbar
                .iter()
                .map(|&s| {
                    let p = s / n as f64;
                    if p > 0.0 {
                        -p * p.ln()
                    } else {
                        0.0
                    }
                })
                .sum();
            h.exp()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct PretrainStats {
    pub contrastive: f64,
    pub diversity: f64,
    pub mean_perplexity: f64,
    pub masked_frames: usize,
    pub gumbel_temperature: f64,
}

/// One pretraining forward pass: masked contextual path, quantized targets,
/// contrastive + alpha * diversity + lambda_wd * L2(weights).
pub fn pretrain_step_loss(
    g: &mut Graph,
    model: &SREModel,
    wave: &Tensor,
    step: u64,
    rng: &mut SplitRng,
) -> Result<(Tensor, PretrainStats)> {
    let cfg = &model.cfg;
    let t = frame_count(wave.shape()[1])?;
    let bsz = wave.shape()[0];
    let tau = cfg.gumbel_temperature(step);

    let z = model.encode_frames(g, wave)?;
    let mut masks = Vec::with_capacity(bsz);
    for _ in 0..bsz {
        masks.push(sample_mask(t, cfg.mask_prob, cfg.mask_span, rng)?);
    }
    let quant = model.quantize(g, &z, tau, true, rng)?;
    let ctx = model.contextualize(g, &z, Some(&flatten(&masks)))?;
    let contrastive = contrastive_loss(
        g,
        &ctx,
        &quant.frames,
        &masks,
        cfg.distractors,
        cfg.contrastive_temp,
        rng,
    )?;
    let diversity = diversity_loss(g, &quant.soft_probs)?;

    let mut loss = contrastive.clone();
    if cfg.diversity_weight > 0.0 {
        let scaled = g.mul_scalar(&diversity, cfg.diversity_weight)?;
        loss = g.add(&loss, &scaled)?;
    }
    if cfg.weight_decay > 0.0 {
        let mut l2: Option<Tensor> = None;
        for w in model.weight_params() {
            let sq = g.mul(&w.value, &w.value)?;
            let s = g.sum_all(&sq)?;
            l2 = Some(match l2 {
                Some(acc) => g.add(&acc, &s)?,
                None => s,
            });
        }
        let l2 = g.mul_scalar(&l2.expect("at least one weight"), cfg.weight_decay)?;
        loss = g.add(&loss, &l2)?;
    }

    let perps = perplexity_per_codebook(&quant.soft_probs);
    let stats = PretrainStats {
        contrastive: contrastive.item()?,
        diversity: diversity.item()?,
        mean_perplexity: perps.iter().sum::<f64>() / perps.len() as f64,
        masked_frames: masks.iter().map(|m| m.count()).sum(),
        gumbel_temperature: tau,
    };
    Ok((loss, stats))
}
