//! Task criteria: cross-entropy for keyword spotting and the angular-margin
//! (A-Softmax) loss with annealing for speaker verification, plus the cosine
//! scoring used at evaluation time.

use crate::error::{Error, Result};
use crate::optim::Param;
use crate::rng::SplitRng;
use crate::tensor::{Graph, Tensor};

/// Mean over the batch of -log softmax(logits)[label], stable via log-sum-exp.
pub fn cross_entropy(g: &mut Graph, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if logits.shape().len() != 2 {
        return Err(Error::dim("cross_entropy expects [B, n] logits"));
    }
    let (b, n) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::dim(format!(
            "cross_entropy: {} labels for batch of {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::contract(format!(
            "cross_entropy: label {bad} out of range [0, {n})"
        )));
    }
    let logp = g.log_softmax(logits)?;
    let picked = g.gather_rows(&logp, labels)?;
    let mean = g.mean_all(&picked)?;
    g.mul_scalar(&mean, -1.0)
}

/// Cosine similarity of two equally-shaped vectors; zero norms are a
/// contract error.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim("cosine_similarity: shape mismatch"));
    }
    cosine_of_slices(a.data(), b.data())
}

pub fn cosine_of_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Err(Error::contract("cosine_similarity of a zero vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone)]
pub struct AngularSoftmaxConfig {
    /// Integer angular margin m.
    pub margin: u32,
    pub lambda0: f64,
    pub gamma: f64,
    pub lambda_min: f64,
}

impl Default for AngularSoftmaxConfig {
    fn default() -> Self {
        AngularSoftmaxConfig {
            margin: 4,
            lambda0: 1000.0,
            gamma: 0.2,
            lambda_min: 5.0,
        }
    }
}

/// A-Softmax criterion: class weight rows are renormalized to unit length on
/// every forward pass, the target logit gets the annealed margin transform,
/// and the embedding keeps its norm.
pub struct AngularSoftmax {
    pub cfg: AngularSoftmaxConfig,
    pub weight: Param, // [n_classes, dim]
}

impl AngularSoftmax {
    pub fn new(
        cfg: AngularSoftmaxConfig,
        n_classes: usize,
        dim: usize,
        rng: &mut SplitRng,
    ) -> Result<AngularSoftmax> {
        if cfg.margin == 0 {
            return Err(Error::param("angular softmax margin must be >= 1"));
        }
        let mut w = vec![0.0; n_classes * dim];
        rng.fill_normal(&mut w, 1.0 / (dim as f64).sqrt());
        Ok(AngularSoftmax {
            cfg,
            weight: Param::new("crit.sv.weight", w, &[n_classes, dim])?,
        })
    }

    /// Annealing factor at optimizer step t (monotone non-increasing to
    /// lambda_min).
    pub fn lambda(&self, t: u64) -> f64 {
        (self.cfg.lambda0 / (1.0 + self.cfg.gamma * t as f64)).max(self.cfg.lambda_min)
    }

    /// Margin loss over a batch of embeddings at annealing step t.
    pub fn loss(
        &self,
        g: &mut Graph,
        emb: &Tensor,
        labels: &[usize],
        t: u64,
    ) -> Result<Tensor> {
        if emb.shape().len() != 2 {
            return Err(Error::dim("angular_softmax expects [B, dim] embeddings"));
        }
        let n = self.weight.value.shape()[0];
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::contract(format!(
                "angular_softmax: label {bad} out of range [0, {n})"
            )));
        }
        let lam = self.lambda(t);
        let w_hat = g.row_normalize(&self.weight.value)?;
        let w_hat_t = g.swap_last2(&w_hat)?;
        let e_hat = g.row_normalize(emb)?; // errors on zero-norm embeddings
        let cos = g.matmul(&e_hat, &w_hat_t)?; // [B, n]
        let norms = g.row_l2norm(emb)?; // [B]
        let target_cos = g.gather_rows(&cos, labels)?;
        let psi = g.angular_psi(&target_cos, self.cfg.margin)?;
        let scaled = g.mul_scalar(&target_cos, lam)?;
        let mixed = g.add(&scaled, &psi)?;
        let f_psi = g.mul_scalar(&mixed, 1.0 / (1.0 + lam))?;
        let delta = g.sub(&f_psi, &target_cos)?;
        let adjusted = g.scatter_rows_add(&cos, &delta, labels)?;
        let logits = g.mul_col(&adjusted, &norms)?;
        cross_entropy(g, &logits, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, CheckSettings};

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "expected {b}, got {a}");
    }

    #[test]
    fn ce_uniform_is_ln_n() {
        let mut g = Graph::inference();
        let logits = Tensor::zeros(&[3, 12]);
        let loss = cross_entropy(&mut g, &logits, &[0, 5, 11]).unwrap();
        assert_close(loss.item().unwrap(), 12f64.ln(), 1e-12);
    }

    #[test]
    fn ce_confident_limit_goes_to_zero() {
        let mut g = Graph::inference();
        let logits = Tensor::from_vec(vec![60.0, 0.0, 0.0], &[1, 3]).unwrap();
        let loss = cross_entropy(&mut g, &logits, &[0]).unwrap();
        assert!(loss.item().unwrap() < 1e-9);
    }

    #[test]
    fn ce_closed_form_example() {
        // logits [2,0,0], label 0 -> -log(e^2 / (e^2 + 2))
        let mut g = Graph::inference();
        let logits = Tensor::from_vec(vec![2.0, 0.0, 0.0], &[1, 3]).unwrap();
        let loss = cross_entropy(&mut g, &logits, &[0]).unwrap();
        let expect = -(2f64.exp() / (2f64.exp() + 2.0)).ln();
        assert_close(loss.item().unwrap(), expect, 1e-12);
        assert_close(expect, 0.2395, 1e-4);
    }

    #[test]
    fn ce_rejects_out_of_range_label() {
        let mut g = Graph::inference();
        let logits = Tensor::zeros(&[1, 3]);
        assert!(cross_entropy(&mut g, &logits, &[3]).is_err());
    }

    #[test]
    fn ce_shift_invariance() {
        let mut g = Graph::inference();
        let logits = Tensor::from_vec(vec![0.3, -1.0, 2.0, 0.1, 0.0, 1.0], &[2, 3]).unwrap();
        let shifted =
            Tensor::from_vec(logits.data().iter().map(|v| v + 57.0).collect(), &[2, 3]).unwrap();
        let l1 = cross_entropy(&mut g, &logits, &[2, 0]).unwrap();
        let l2 = cross_entropy(&mut g, &shifted, &[2, 0]).unwrap();
        assert_close(l1.item().unwrap(), l2.item().unwrap(), 1e-12);
    }

    #[test]
    fn ce_gradcheck() {
        let mut rng = SplitRng::seed_from(4);
        let mut v = vec![0.0; 4 * 5];
        rng.fill_normal(&mut v, 1.0);
        let logits = Tensor::from_vec(v, &[4, 5]).unwrap();
        check_gradients(
            &[logits],
            |g, ps| cross_entropy(g, &ps[0], &[1, 0, 4, 2]),
            CheckSettings::default(),
        )
        .unwrap();
    }

    #[test]
    fn cosine_basics() {
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        assert_close(cosine_similarity(&a, &a).unwrap(), 1.0, 1e-12);
        let x = Tensor::from_vec(vec![1.0, 0.0], &[2]).unwrap();
        let y = Tensor::from_vec(vec![0.0, 1.0], &[2]).unwrap();
        assert_close(cosine_similarity(&x, &y).unwrap(), 0.0, 1e-12);
        // scale invariance
        let a2 = Tensor::from_vec(a.data().iter().map(|v| 2.0 * v).collect(), &[3]).unwrap();
        let b = Tensor::from_vec(vec![-0.3, 0.9, 0.4], &[3]).unwrap();
        assert_close(
            cosine_similarity(&a2, &b).unwrap(),
            cosine_similarity(&a, &b).unwrap(),
            1e-12,
        );
        let z = Tensor::zeros(&[3]);
        assert!(cosine_similarity(&z, &a).is_err());
    }

    fn crit(margin: u32, n: usize, dim: usize, seed: u64) -> AngularSoftmax {
        let mut rng = SplitRng::seed_from(seed);
        AngularSoftmax::new(
            AngularSoftmaxConfig {
                margin,
                ..Default::default()
            },
            n,
            dim,
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn margin_one_reduces_to_cosine_logit_ce() {
        let mut rng = SplitRng::seed_from(8);
        for trial in 0..10 {
            let c = crit(1, 5, 8, 100 + trial);
            let mut ev = vec![0.0; 3 * 8];
            rng.fill_normal(&mut ev, 1.0);
            let emb = Tensor::from_vec(ev, &[3, 8]).unwrap();
            let labels = [0usize, 3, 2];

            let mut g = Graph::inference();
            let loss = c.loss(&mut g, &emb, &labels, trial as u64 * 37).unwrap();

            // Independent route: plain CE over ||e|| * cos logits.
            let w_hat = g.row_normalize(&c.weight.value).unwrap();
            let w_t = g.swap_last2(&w_hat).unwrap();
            let e_hat = g.row_normalize(&emb).unwrap();
            let cos = g.matmul(&e_hat, &w_t).unwrap();
            let norms = g.row_l2norm(&emb).unwrap();
            let logits = g.mul_col(&cos, &norms).unwrap();
            let plain = cross_entropy(&mut g, &logits, &labels).unwrap();

            assert_close(loss.item().unwrap(), plain.item().unwrap(), 1e-9);
        }
    }

    #[test]
    fn aligned_embedding_has_maximal_target_logit() {
        // emb exactly along W_y: theta = 0, psi(0) = 1 for any m, so the
        // target logit equals ||e|| and the loss is below ln(n).
        let c = crit(4, 3, 4, 9);
        let wrow: Vec<f64> = c.weight.value.data()[0..4].to_vec();
        let emb = Tensor::from_vec(wrow.iter().map(|v| v * 3.0).collect(), &[1, 4]).unwrap();
        let mut g = Graph::inference();
        let loss = c.loss(&mut g, &emb, &[0], 0).unwrap();
        assert!(loss.item().unwrap() < 3f64.ln());
    }

    #[test]
    fn spec_scalar_oracle_b1_dim2_m2() {
        // theta_y = pi/4, theta_other = 3pi/4, ||emb|| = 1, lambda = 5, m = 2.
        let cfg = AngularSoftmaxConfig {
            margin: 2,
            ..Default::default()
        };
        let mut rng = SplitRng::seed_from(1);
        let mut c = AngularSoftmax::new(cfg, 2, 2, &mut rng).unwrap();
        c.weight.value = Tensor::param(vec![1.0, 0.0, -1.0, 0.0], &[2, 2]).unwrap();
        let th = std::f64::consts::FRAC_PI_4;
        let emb = Tensor::from_vec(vec![th.cos(), th.sin()], &[1, 2]).unwrap();
        let mut g = Graph::inference();
        let t_at_lambda_min = 10_000;
        assert_close(c.lambda(t_at_lambda_min), 5.0, 0.0);
        let loss = c.loss(&mut g, &emb, &[0], t_at_lambda_min).unwrap();

        // Independent scalar evaluation of the published formula.
        let lam = 5.0;
        let psi = (2.0 * th).cos(); // k = 0 on [0, pi/2) for m = 2
        let f_target = (lam * th.cos() + psi) / (1.0 + lam);
        let other = (3.0 * std::f64::consts::FRAC_PI_4).cos();
        let expect = -(f_target.exp() / (f_target.exp() + other.exp())).ln();
        assert_close(loss.item().unwrap(), expect, 1e-9);
    }

    #[test]
    fn margin_penalizes_target_inside_first_sector() {
        // For theta_y in (0, pi/m), the m>1 loss dominates the m=1 loss.
        let c4 = crit(4, 4, 6, 31);
        let mut c1 = crit(1, 4, 6, 31);
        c1.weight.value = Tensor::param(
            c4.weight.value.data().to_vec(),
            c4.weight.value.shape(),
        )
        .unwrap();
        // Build an embedding at a small angle from W_0.
        let w0: Vec<f64> = c4.weight.value.data()[0..6].to_vec();
        let mut emb: Vec<f64> = w0.iter().map(|v| v * 2.0).collect();
        emb[0] += 0.2; // nudge off-axis, staying well inside theta < pi/4
        let emb = Tensor::from_vec(emb, &[1, 6]).unwrap();
        let mut g = Graph::inference();
        let l4 = c4.loss(&mut g, &emb, &[0], 1_000_000).unwrap();
        let l1 = c1.loss(&mut g, &emb, &[0], 1_000_000).unwrap();
        assert!(
            l4.item().unwrap() >= l1.item().unwrap(),
            "margin must not reduce the loss"
        );
    }

    #[test]
    fn zero_norm_embedding_is_contract_error() {
        let c = crit(4, 3, 4, 2);
        let emb = Tensor::zeros(&[1, 4]);
        let mut g = Graph::inference();
        assert!(c.loss(&mut g, &emb, &[0], 0).is_err());
    }

    #[test]
    fn lambda_schedule_monotone_to_min() {
        let c = crit(4, 2, 2, 3);
        let mut prev = f64::INFINITY;
        for t in 0..2000 {
            let l = c.lambda(t);
            assert!(l <= prev);
            assert!(l >= 5.0);
            prev = l;
        }
        assert_close(c.lambda(100_000), 5.0, 0.0);
    }

    #[test]
    fn angular_softmax_gradcheck_away_from_boundaries() {
        // Random draws rarely land near the psi interval boundaries; retry
        // seeds that do (boundary = cos(k*pi/m)).
        let mut checked = 0;
        for seed in 0..20u64 {
            let c = crit(4, 4, 5, 200 + seed);
            let mut rng = SplitRng::seed_from(500 + seed);
            let mut ev = vec![0.0; 2 * 5];
            rng.fill_normal(&mut ev, 1.0);
            let emb = Tensor::from_vec(ev, &[2, 5]).unwrap();
            let labels = [seed as usize % 4, 1];

            // Skip draws whose target cosine sits near a boundary.
            let mut g = Graph::inference();
            let w_hat = g.row_normalize(&c.weight.value).unwrap();
            let w_t = g.swap_last2(&w_hat).unwrap();
            let e_hat = g.row_normalize(&emb).unwrap();
            let cos = g.matmul(&e_hat, &w_t).unwrap();
            let near_boundary = labels.iter().enumerate().any(|(i, &l)| {
                let cth = cos.at(&[i, l]);
                (0..=4).any(|k| {
                    (cth - (k as f64 * std::f64::consts::PI / 4.0).cos()).abs() < 5e-3
                })
            });
            if near_boundary {
                continue;
            }

            let wv = c.weight.value.detach();
            check_gradients(
                &[emb, wv],
                |g, ps| {
                    let mut crit2 = crit(4, 4, 5, 0);
                    crit2.weight.value = ps[1].clone();
                    crit2.loss(g, &ps[0], &labels, 500)
                },
                CheckSettings::default(),
            )
            .unwrap();
            checked += 1;
        }
        assert!(checked >= 10, "too many boundary skips: {checked}");
    }
}
