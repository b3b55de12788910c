//! Building blocks composed from the primitive ops: affine maps, sinusoidal
//! positional encodings, scaled-dot-product attention, and the LSTM cell.
//! All of them differentiate through the primitives they are built from.

use super::{Graph, Tensor};
use crate::error::{Error, Result};

/// x[N, d] * w[d, out] + b[out]
pub fn linear(g: &mut Graph, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let y = g.matmul(x, w)?;
    g.bias_add(&y, b)
}

/// Affine map over the last axis of an [.., d] tensor.
pub fn linear_nd(g: &mut Graph, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = *x.shape().last().ok_or_else(|| Error::dim("linear on scalar"))?;
    let rows = x.numel() / d;
    let flat = g.reshape(x, &[rows, d])?;
    let y = linear(g, &flat, w, b)?;
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = w.shape()[1];
    g.reshape(&y, &shape)
}

/// Sinusoidal positional encoding table of shape [t_len, d].
pub fn positional_encoding(t_len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; t_len * d];
    for t in 0..t_len {
        for i in 0..d / 2 {
            let omega = 1.0 / 10_000f64.powf(2.0 * i as f64 / d as f64);
            pe[t * d + 2 * i] = (t as f64 * omega).sin();
            pe[t * d + 2 * i + 1] = (t as f64 * omega).cos();
        }
        if d % 2 == 1 {
            let i = d / 2;
            let omega = 1.0 / 10_000f64.powf(2.0 * i as f64 / d as f64);
            pe[t * d + d - 1] = (t as f64 * omega).sin();
        }
    }
    pe
}

/// x[B, T, d] + PE[T, d], the encoding tiled over the batch.
pub fn add_positional(g: &mut Graph, x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 3 {
        return Err(Error::dim("add_positional expects [B, T, d]"));
    }
    let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let table = positional_encoding(t, d);
    let mut tiled = Vec::with_capacity(b * t * d);
    for _ in 0..b {
        tiled.extend_from_slice(&table);
    }
    let pe = Tensor::from_vec(tiled, &[b, t, d])?;
    g.add(x, &pe)
}

/// Multi-head scaled-dot-product attention over already-projected q/k/v of
/// shape [B, T, d]; d must divide evenly into n_heads chunks.
pub fn scaled_dot_attention(
    g: &mut Graph,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    n_heads: usize,
) -> Result<Tensor> {
    if q.shape().len() != 3 {
        return Err(Error::dim("attention expects [B, T, d]"));
    }
    let d = q.shape()[2];
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::param(format!(
            "attention: d_model {d} not divisible by {n_heads} heads"
        )));
    }
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.narrow(q, 2, h * dh, dh)?;
        let kh = g.narrow(k, 2, h * dh, dh)?;
        let vh = g.narrow(v, 2, h * dh, dh)?;
        let kt = g.swap_last2(&kh)?;
        let scores = g.bmm(&qh, &kt)?;
        let scores = g.mul_scalar(&scores, scale)?;
        let probs = g.softmax(&scores, 2)?;
        outs.push(g.bmm(&probs, &vh)?);
    }
    let refs: Vec<&Tensor> = outs.iter().collect();
    g.concat(&refs, 2)
}

/// One LSTM step. Gate order in the fused weight matrices is (i, f, g, o):
/// wx: [d, 4H], wh: [H, 4H], b: [4H]. Returns (h', c').
pub fn lstm_step(
    g: &mut Graph,
    x: &Tensor,
    h: &Tensor,
    c: &Tensor,
    wx: &Tensor,
    wh: &Tensor,
    b: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let hid = wh.shape()[0];
    let xs = g.matmul(x, wx)?;
    let hs = g.matmul(h, wh)?;
    let gates = g.add(&xs, &hs)?;
    let gates = g.bias_add(&gates, b)?;
    let i_gate = g.narrow(&gates, 1, 0, hid)?;
    let f_gate = g.narrow(&gates, 1, hid, hid)?;
    let g_gate = g.narrow(&gates, 1, 2 * hid, hid)?;
    let o_gate = g.narrow(&gates, 1, 3 * hid, hid)?;
    let i_gate = g.sigmoid(&i_gate)?;
    let f_gate = g.sigmoid(&f_gate)?;
    let g_gate = g.tanh(&g_gate)?;
    let o_gate = g.sigmoid(&o_gate)?;
    let fc = g.mul(&f_gate, c)?;
    let ig = g.mul(&i_gate, &g_gate)?;
    let c_next = g.add(&fc, &ig)?;
    let c_act = g.tanh(&c_next)?;
    let h_next = g.mul(&o_gate, &c_act)?;
    Ok((h_next, c_next))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_encoding_first_row_alternates() {
        let pe = positional_encoding(4, 6);
        // t = 0: sin(0) = 0, cos(0) = 1 in alternating slots
        assert_eq!(&pe[0..6], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn attention_rejects_bad_heads() {
        let mut g = Graph::new();
        let x = Tensor::zeros(&[1, 3, 6]);
        assert!(scaled_dot_attention(&mut g, &x, &x, &x, 4).is_err());
    }
}
