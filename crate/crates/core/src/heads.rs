//! Downstream networks mapping the SRE output C to class scores (keyword
//! spotting) or an embedding (speaker verification): a first-timestep linear
//! readout, a single-layer Bi-LSTM, and strided 1D-CNN blocks.

use crate::error::{Error, Result};
use crate::optim::Param;
use crate::rng::SplitRng;
use crate::tensor::{compose, Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Linear,
    BiLstm,
    Cnn1d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputKind {
    ClassScores(usize),
    Embedding(usize),
}

impl OutputKind {
    pub fn dim(&self) -> usize {
        match self {
            OutputKind::ClassScores(n) | OutputKind::Embedding(n) => *n,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub output: OutputKind,
    pub lstm_hidden: usize,
    pub cnn_filters: usize,
    pub cnn_kernel: usize,
    /// Input duration the CNN variant is built for (1 or 2 seconds).
    pub input_seconds: u8,
    /// Include the complementary endpoint reads of the Bi-LSTM (4 x hidden
    /// instead of 2 x hidden going into the output map).
    pub bilstm_all_endpoints: bool,
}

impl HeadConfig {
    pub fn new(kind: HeadKind, output: OutputKind) -> HeadConfig {
        HeadConfig {
            kind,
            output,
            lstm_hidden: 256,
            cnn_filters: 128,
            cnn_kernel: 25,
            input_seconds: 1,
            bilstm_all_endpoints: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.output.dim() == 0 {
            return Err(Error::param("head output dimension must be positive"));
        }
        if self.lstm_hidden == 0 || self.cnn_filters == 0 || self.cnn_kernel == 0 {
            return Err(Error::param("head sizes must be positive"));
        }
        if self.kind == HeadKind::Cnn1d && !matches!(self.input_seconds, 1 | 2) {
            return Err(Error::param("cnn head supports 1 or 2 second inputs"));
        }
        Ok(())
    }
}

/// Frame counts the CNN head is defined for, and the padded lengths that make
/// the strided blocks land on exactly 16 output steps.
const FRAMES_1S: usize = 49;
const FRAMES_2S: usize = 99;
const PADDED_1S: usize = 64;
const PADDED_2S: usize = 128;
const CNN_OUT_STEPS: usize = 16;

struct LstmDirection {
    wx: Param,
    wh: Param,
    b: Param,
}

struct ConvBnBlock {
    w: Param,
    b: Param,
    bn_g: Param,
    bn_b: Param,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

impl ConvBnBlock {
    fn new(name: &str, filters: usize, c_in: usize, k: usize, rng: &mut SplitRng) -> ConvBnBlock {
        let scale = (2.0 / (c_in * k) as f64).sqrt();
        ConvBnBlock {
            w: Param::normal(format!("{name}.w"), &[filters, c_in, k], scale, rng),
            b: Param::zeros(format!("{name}.b"), &[filters]),
            bn_g: Param::full(format!("{name}.bn_g"), &[filters], 1.0),
            bn_b: Param::zeros(format!("{name}.bn_b"), &[filters]),
            running_mean: vec![0.0; filters],
            running_var: vec![1.0; filters],
        }
    }

    /// conv -> ReLU -> batch norm; batch statistics in training, running
    /// averages (momentum 0.9) in evaluation.
    fn forward(
        &mut self,
        g: &mut Graph,
        x: &Tensor,
        stride: usize,
        pad: (usize, usize),
        train: bool,
    ) -> Result<Tensor> {
        let y = g.conv1d_asym(x, &self.w.value, &self.b.value, stride, pad.0, pad.1)?;
        let y = g.relu(&y)?;
        if train {
            let (out, mean, var) = g.batch_norm_train(&y, &self.bn_g.value, &self.bn_b.value, 1e-5)?;
            for (r, m) in self.running_mean.iter_mut().zip(&mean) {
                *r = 0.9 * *r + 0.1 * m;
            }
            for (r, v) in self.running_var.iter_mut().zip(&var) {
                *r = 0.9 * *r + 0.1 * v;
            }
            Ok(out)
        } else {
            g.batch_norm_eval(
                &y,
                &self.bn_g.value,
                &self.bn_b.value,
                &self.running_mean,
                &self.running_var,
                1e-5,
            )
        }
    }
}

enum HeadParams {
    Linear {
        w: Param,
        b: Param,
    },
    BiLstm {
        fwd: LstmDirection,
        bwd: LstmDirection,
        out_w: Param,
        out_b: Param,
    },
    Cnn {
        pre: Option<ConvBnBlock>, // stride-2 block, 2 s inputs only
        main: ConvBnBlock,        // stride-4 block
        out_w: Param,
        out_b: Param,
    },
}

pub struct TaskHead {
    pub cfg: HeadConfig,
    pub name: String,
    params: HeadParams,
}

/// SAME-style padding for a strided conv: output length ceil(l / stride),
/// excess split left-low / right-high.
fn same_padding(l: usize, k: usize, stride: usize) -> (usize, usize) {
    let l_out = l.div_ceil(stride);
    let total = ((l_out - 1) * stride + k).saturating_sub(l);
    (total / 2, total - total / 2)
}

impl TaskHead {
    pub fn new(name: impl Into<String>, cfg: HeadConfig, d_model: usize, rng: &SplitRng) -> Result<TaskHead> {
        cfg.validate()?;
        let name = name.into();
        let mut init = rng.split(&format!("{name}_init"));
        let out_dim = cfg.output.dim();
        let lin = |n: String, fi: usize, fo: usize, r: &mut SplitRng| {
            Param::normal(n, &[fi, fo], (1.0 / fi as f64).sqrt(), r)
        };
        let params = match cfg.kind {
            HeadKind::Linear => HeadParams::Linear {
                w: lin(format!("{name}.w"), d_model, out_dim, &mut init),
                b: Param::zeros(format!("{name}.b"), &[out_dim]),
            },
            HeadKind::BiLstm => {
                let h = cfg.lstm_hidden;
                let dir = |tag: &str, init: &mut SplitRng| LstmDirection {
                    wx: lin(format!("{name}.{tag}.wx"), d_model, 4 * h, init),
                    wh: lin(format!("{name}.{tag}.wh"), h, 4 * h, init),
                    b: Param::zeros(format!("{name}.{tag}.b"), &[4 * h]),
                };
                let reads = if cfg.bilstm_all_endpoints { 4 } else { 2 };
                HeadParams::BiLstm {
                    fwd: dir("fwd", &mut init),
                    bwd: dir("bwd", &mut init),
                    out_w: lin(format!("{name}.out_w"), reads * h, out_dim, &mut init),
                    out_b: Param::zeros(format!("{name}.out_b"), &[out_dim]),
                }
            }
            HeadKind::Cnn1d => {
                let f = cfg.cnn_filters;
                let k = cfg.cnn_kernel;
                let (pre, main_in) = if cfg.input_seconds == 2 {
                    (
                        Some(ConvBnBlock::new(
                            &format!("{name}.pre"),
                            f,
                            d_model,
                            k,
                            &mut init,
                        )),
                        f,
                    )
                } else {
                    (None, d_model)
                };
                HeadParams::Cnn {
                    pre,
                    main: ConvBnBlock::new(&format!("{name}.main"), f, main_in, k, &mut init),
                    out_w: lin(
                        format!("{name}.out_w"),
                        CNN_OUT_STEPS * f,
                        out_dim,
                        &mut init,
                    ),
                    out_b: Param::zeros(format!("{name}.out_b"), &[out_dim]),
                }
            }
        };
        Ok(TaskHead { cfg, name, params })
    }

    pub fn output_dim(&self) -> usize {
        self.cfg.output.dim()
    }

    /// Map SRE output [B, T, d] to [B, out]. `train` controls batch-norm
    /// statistics (and updates the running averages).
    pub fn forward(&mut self, g: &mut Graph, c: &Tensor, train: bool) -> Result<Tensor> {
        if c.shape().len() != 3 {
            return Err(Error::dim("head forward expects [B, T, d]"));
        }
        let (bsz, t, d) = (c.shape()[0], c.shape()[1], c.shape()[2]);
        if t == 0 {
            return Err(Error::dim("head forward needs T >= 1"));
        }
        match &mut self.params {
            HeadParams::Linear { w, b } => {
                let first = g.narrow(c, 1, 0, 1)?;
                let flat = g.reshape(&first, &[bsz, d])?;
                compose::linear(g, &flat, &w.value, &b.value)
            }
            HeadParams::BiLstm { fwd, bwd, out_w, out_b } => {
                let h = fwd.wh.value.shape()[0];
                let scan = |g: &mut Graph, dir: &LstmDirection, reversed: bool| -> Result<(Tensor, Tensor)> {
                    let mut hid = Tensor::zeros(&[bsz, h]);
                    let mut cell = Tensor::zeros(&[bsz, h]);
                    let mut first_state: Option<Tensor> = None;
                    for step in 0..t {
                        let ti = if reversed { t - 1 - step } else { step };
                        let x = g.narrow(c, 1, ti, 1)?;
                        let x = g.reshape(&x, &[bsz, d])?;
                        let (h2, c2) =
                            compose::lstm_step(g, &x, &hid, &cell, &dir.wx.value, &dir.wh.value, &dir.b.value)?;
                        hid = h2;
                        cell = c2;
                        if step == 0 {
                            first_state = Some(hid.clone());
                        }
                    }
                    Ok((hid, first_state.expect("t >= 1")))
                };
                // forward scan ends at T-1; backward scan ends at 0
                let (h_f_last, h_f_first) = scan(g, fwd, false)?;
                let (h_b_first, h_b_last) = scan(g, bwd, true)?;
                let combined = if self.cfg.bilstm_all_endpoints {
                    g.concat(&[&h_f_last, &h_b_first, &h_f_first, &h_b_last], 1)?
                } else {
                    g.concat(&[&h_f_last, &h_b_first], 1)?
                };
                compose::linear(g, &combined, &out_w.value, &out_b.value)
            }
            HeadParams::Cnn { pre, main, out_w, out_b } => {
                let k = self.cfg.cnn_kernel;
                let f = self.cfg.cnn_filters;
                let expected = if self.cfg.input_seconds == 2 { FRAMES_2S } else { FRAMES_1S };
                if t != expected {
                    return Err(Error::dim(format!(
                        "cnn head built for {} s input expects {expected} frames, got {t}",
                        self.cfg.input_seconds
                    )));
                }
                let mut x = g.swap_last2(c)?; // [B, d, T]
                if self.cfg.input_seconds == 2 {
                    x = g.pad_last(&x, 0, PADDED_2S - FRAMES_2S)?;
                    let block = pre.as_mut().expect("2s head has a pre block");
                    let pad = same_padding(PADDED_2S, k, 2);
                    x = block.forward(g, &x, 2, pad, train)?; // -> [B, F, 64]
                } else {
                    x = g.pad_last(&x, 0, PADDED_1S - FRAMES_1S)?;
                }
                let l_in = x.shape()[2];
                let pad = same_padding(l_in, k, 4);
                let y = main.forward(g, &x, 4, pad, train)?; // -> [B, F, 16]
                debug_assert_eq!(y.shape()[2], CNN_OUT_STEPS);
                let flat = g.reshape(&y, &[bsz, f * CNN_OUT_STEPS])?;
                compose::linear(g, &flat, &out_w.value, &out_b.value)
            }
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match &self.params {
            HeadParams::Linear { w, b } => vec![w, b],
            HeadParams::BiLstm { fwd, bwd, out_w, out_b } => vec![
                &fwd.wx, &fwd.wh, &fwd.b, &bwd.wx, &bwd.wh, &bwd.b, out_w, out_b,
            ],
            HeadParams::Cnn { pre, main, out_w, out_b } => {
                let mut out = Vec::new();
                if let Some(p) = pre {
                    out.extend([&p.w, &p.b, &p.bn_g, &p.bn_b]);
                }
                out.extend([&main.w, &main.b, &main.bn_g, &main.bn_b, out_w, out_b]);
                out
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match &mut self.params {
            HeadParams::Linear { w, b } => vec![w, b],
            HeadParams::BiLstm { fwd, bwd, out_w, out_b } => vec![
                &mut fwd.wx, &mut fwd.wh, &mut fwd.b, &mut bwd.wx, &mut bwd.wh, &mut bwd.b,
                out_w, out_b,
            ],
            HeadParams::Cnn { pre, main, out_w, out_b } => {
                let mut out = Vec::new();
                if let Some(p) = pre {
                    out.extend([&mut p.w, &mut p.b, &mut p.bn_g, &mut p.bn_b]);
                }
                out.extend([
                    &mut main.w, &mut main.b, &mut main.bn_g, &mut main.bn_b, out_w, out_b,
                ]);
                out
            }
        }
    }

    /// Non-trainable state (batch-norm running statistics), named for
    /// checkpointing.
    pub fn buffers(&self) -> Vec<(String, Vec<f64>)> {
        match &self.params {
            HeadParams::Cnn { pre, main, .. } => {
                let mut out = Vec::new();
                if let Some(p) = pre {
                    out.push((format!("{}.pre.running_mean", self.name), p.running_mean.clone()));
                    out.push((format!("{}.pre.running_var", self.name), p.running_var.clone()));
                }
                out.push((format!("{}.main.running_mean", self.name), main.running_mean.clone()));
                out.push((format!("{}.main.running_var", self.name), main.running_var.clone()));
                out
            }
            _ => Vec::new(),
        }
    }

    pub fn load_buffer(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let put = |dst: &mut Vec<f64>, values: &[f64]| -> Result<()> {
            if dst.len() != values.len() {
                return Err(Error::dim(format!("buffer '{name}' length mismatch")));
            }
            dst.copy_from_slice(values);
            Ok(())
        };
        if let HeadParams::Cnn { pre, main, .. } = &mut self.params {
            if let Some(p) = pre {
                if name == format!("{}.pre.running_mean", self.name) {
                    return put(&mut p.running_mean, values);
                }
                if name == format!("{}.pre.running_var", self.name) {
                    return put(&mut p.running_var, values);
                }
            }
            if name == format!("{}.main.running_mean", self.name) {
                return put(&mut main.running_mean, values);
            }
            if name == format!("{}.main.running_var", self.name) {
                return put(&mut main.running_var, values);
            }
        }
        Err(Error::format(format!("unknown buffer '{name}'")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> SplitRng {
        SplitRng::seed_from(7)
    }

    fn rand_c(b: usize, t: usize, d: usize, seed: u64) -> Tensor {
        let mut v = vec![0.0; b * t * d];
        SplitRng::seed_from(seed).fill_normal(&mut v, 1.0);
        Tensor::from_vec(v, &[b, t, d]).unwrap()
    }

    #[test]
    fn linear_identity_returns_first_timestep() {
        let d = 4;
        let cfg = HeadConfig::new(HeadKind::Linear, OutputKind::Embedding(d));
        let mut head = TaskHead::new("head.t", cfg, d, &rng()).unwrap();
        // W = I, b = 0
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        head.params_mut()[0].value = Tensor::param(eye, &[d, d]).unwrap();
        head.params_mut()[1].value = Tensor::param(vec![0.0; d], &[d]).unwrap();
        let c = rand_c(2, 5, d, 1);
        let mut g = Graph::inference();
        let out = head.forward(&mut g, &c, false).unwrap();
        for bi in 0..2 {
            for j in 0..d {
                assert_eq!(out.at(&[bi, j]), c.at(&[bi, 0, j]));
            }
        }
    }

    #[test]
    fn linear_ignores_later_timesteps() {
        let cfg = HeadConfig::new(HeadKind::Linear, OutputKind::ClassScores(3));
        let mut head = TaskHead::new("head.t", cfg, 4, &rng()).unwrap();
        let c1 = rand_c(1, 6, 4, 2);
        let mut v2 = c1.data().to_vec();
        for x in v2[4..].iter_mut() {
            *x += 5.0; // perturb everything after t = 0
        }
        let c2 = Tensor::from_vec(v2, &[1, 6, 4]).unwrap();
        let mut g = Graph::inference();
        let o1 = head.forward(&mut g, &c1, false).unwrap();
        let o2 = head.forward(&mut g, &c2, false).unwrap();
        assert_eq!(o1.data(), o2.data());
    }

    #[test]
    fn linear_zero_weight_returns_bias() {
        let cfg = HeadConfig::new(HeadKind::Linear, OutputKind::ClassScores(3));
        let mut head = TaskHead::new("head.t", cfg, 4, &rng()).unwrap();
        head.params_mut()[0].value = Tensor::param(vec![0.0; 12], &[4, 3]).unwrap();
        head.params_mut()[1].value = Tensor::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let mut g = Graph::inference();
        let out = head.forward(&mut g, &rand_c(2, 3, 4, 3), false).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn bilstm_t1_is_well_defined() {
        let mut cfg = HeadConfig::new(HeadKind::BiLstm, OutputKind::ClassScores(5));
        cfg.lstm_hidden = 6;
        let mut head = TaskHead::new("head.t", cfg, 4, &rng()).unwrap();
        let mut g = Graph::inference();
        let out = head.forward(&mut g, &rand_c(2, 1, 4, 4), false).unwrap();
        assert_eq!(out.shape(), &[2, 5]);
        assert!(out.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn bilstm_zero_input_zero_bias_outputs_final_bias() {
        let mut cfg = HeadConfig::new(HeadKind::BiLstm, OutputKind::ClassScores(3));
        cfg.lstm_hidden = 4;
        let mut head = TaskHead::new("head.t", cfg, 2, &rng()).unwrap();
        // zero the output bias explicitly and check zero output, then set it
        let n = head.params_mut().len();
        head.params_mut()[n - 1].value = Tensor::param(vec![0.5, -1.0, 0.0], &[3]).unwrap();
        let c = Tensor::zeros(&[1, 4, 2]);
        let mut g = Graph::inference();
        let out = head.forward(&mut g, &c, false).unwrap();
        assert_eq!(out.data(), &[0.5, -1.0, 0.0]);
    }

    #[test]
    fn bilstm_reversal_swaps_endpoint_reads() {
        // With tied direction weights and an identity output map, reversing
        // the input swaps the two halves of the combined vector.
        let h = 3;
        let mut cfg = HeadConfig::new(HeadKind::BiLstm, OutputKind::Embedding(2 * h));
        cfg.lstm_hidden = h;
        let mut head = TaskHead::new("head.t", cfg, 2, &rng()).unwrap();
        // tie bwd = fwd
        {
            let mut ps = head.params_mut();
            let wx = ps[0].value.clone();
            let wh = ps[1].value.clone();
            let b = ps[2].value.clone();
            ps[3].value = wx;
            ps[4].value = wh;
            ps[5].value = b;
            let mut eye = vec![0.0; (2 * h) * (2 * h)];
            for i in 0..2 * h {
                eye[i * (2 * h) + i] = 1.0;
            }
            ps[6].value = Tensor::param(eye, &[2 * h, 2 * h]).unwrap();
            ps[7].value = Tensor::param(vec![0.0; 2 * h], &[2 * h]).unwrap();
        }
        let c = rand_c(1, 5, 2, 9);
        let mut rev = vec![0.0; 5 * 2];
        for tix in 0..5 {
            rev[tix * 2..(tix + 1) * 2].copy_from_slice(
                &c.data()[(4 - tix) * 2..(5 - tix) * 2],
            );
        }
        let c_rev = Tensor::from_vec(rev, &[1, 5, 2]).unwrap();
        let mut g = Graph::inference();
        let a = head.forward(&mut g, &c, false).unwrap();
        let b = head.forward(&mut g, &c_rev, false).unwrap();
        for j in 0..h {
            assert!((a.at(&[0, j]) - b.at(&[0, h + j])).abs() < 1e-12);
            assert!((a.at(&[0, h + j]) - b.at(&[0, j])).abs() < 1e-12);
        }
    }

    fn cnn_head(seconds: u8, d: usize, out: usize) -> TaskHead {
        let mut cfg = HeadConfig::new(HeadKind::Cnn1d, OutputKind::ClassScores(out));
        cfg.cnn_filters = 8;
        cfg.input_seconds = seconds;
        TaskHead::new("head.t", cfg, d, &rng()).unwrap()
    }

    #[test]
    fn cnn_1s_reduces_to_16_steps() {
        // 49 frames -> pad 64 -> stride 4 SAME -> 16; the flatten/linear only
        // fits if that holds.
        let mut head = cnn_head(1, 4, 3);
        let mut g = Graph::inference();
        let out = head.forward(&mut g, &rand_c(2, 49, 4, 5), false).unwrap();
        assert_eq!(out.shape(), &[2, 3]);
        assert_eq!(same_padding(64, 25, 4), (10, 11));
        assert_eq!((64 + 21 - 25) / 4 + 1, 16);
    }

    #[test]
    fn cnn_2s_reduces_128_to_64_to_16() {
        let mut head = cnn_head(2, 4, 3);
        let mut g = Graph::inference();
        let out = head.forward(&mut g, &rand_c(1, 99, 4, 6), false).unwrap();
        assert_eq!(out.shape(), &[1, 3]);
        assert_eq!(same_padding(128, 25, 2), (11, 12));
        assert_eq!((128 + 23 - 25) / 2 + 1, 64);
        assert_eq!(same_padding(64, 25, 4), (10, 11));
    }

    #[test]
    fn cnn_rejects_mismatched_duration() {
        let mut head = cnn_head(1, 4, 3);
        let mut g = Graph::inference();
        assert!(head.forward(&mut g, &rand_c(1, 99, 4, 7), false).is_err());
        assert!(head.forward(&mut g, &rand_c(1, 50, 4, 7), false).is_err());
    }

    #[test]
    fn cnn_zero_input_is_deterministic_constant() {
        let mut head = cnn_head(1, 4, 3);
        let c = Tensor::zeros(&[2, 49, 4]);
        let mut g = Graph::inference();
        let a = head.forward(&mut g, &c, false).unwrap();
        let b = head.forward(&mut g, &c, false).unwrap();
        assert_eq!(a.data(), b.data());
        // both rows equal (same constant per output)
        assert_eq!(a.data()[..3], a.data()[3..6]);
    }

    #[test]
    fn cnn_batchnorm_train_updates_running_stats_eval_uses_them() {
        let mut head = cnn_head(1, 4, 3);
        let before = head.buffers();
        let c = rand_c(4, 49, 4, 8);
        let mut g = Graph::inference();
        head.forward(&mut g, &c, true).unwrap();
        let after = head.buffers();
        assert_ne!(before[0].1, after[0].1, "running mean moved");
        // eval with batch size 1 works off running stats
        let single = rand_c(1, 49, 4, 9);
        let out = head.forward(&mut g, &single, false).unwrap();
        assert!(out.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn output_dims_follow_config_regardless_of_kind() {
        for kind in [HeadKind::Linear, HeadKind::BiLstm, HeadKind::Cnn1d] {
            let mut cfg = HeadConfig::new(kind, OutputKind::Embedding(10));
            cfg.lstm_hidden = 4;
            cfg.cnn_filters = 6;
            let mut head = TaskHead::new("head.t", cfg, 4, &rng()).unwrap();
            let mut g = Graph::inference();
            let out = head.forward(&mut g, &rand_c(2, 49, 4, 10), false).unwrap();
            assert_eq!(out.shape(), &[2, 10]);
        }
    }
}
