//! Encoder sub-layers expressed as graph compositions.

use crate::error::{Error, Result};
use crate::tensor::{AttentionMask, Graph, Real, Var};

/// Parameter handles of one encoder block inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

/// `x / sqrt(mean(x²) + eps) ⊙ gamma`, no centering and no bias.
pub fn rmsnorm<T: Real>(g: &mut Graph<T>, x: Var, gamma: Var, eps: f64) -> Result<Var> {
    g.rmsnorm(x, gamma, T::of(eps))
}

/// Rotates `(2i, 2i+1)` pairs of `[B, H, L, head_dim]` by `m·theta^(-2i/head_dim)`.
pub fn rope_apply<T: Real>(g: &mut Graph<T>, x: Var, positions: &[usize], theta: f64) -> Result<Var> {
    g.rope(x, positions, theta)
}

/// `(SiLU(x·W_gate) ⊙ (x·W_up)) · W_down`
pub fn swiglu_ffn<T: Real>(g: &mut Graph<T>, x: Var, w_gate: Var, w_up: Var, w_down: Var) -> Result<Var> {
    let gate = g.matmul(x, w_gate)?;
    let gate = g.silu(gate)?;
    let up = g.matmul(x, w_up)?;
    let hidden = g.mul(gate, up)?;
    g.matmul(hidden, w_down)
}

/// Pre-norm self-attention sub-layer with residual:
/// `x + W_O · attn(rope(h·W_Q), rope(h·W_K), h·W_V)` where `h = rmsnorm(x)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_block<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    block: &BlockVars,
    heads: usize,
    mask: &AttentionMask,
    positions: &[usize],
    theta: f64,
    eps: f64,
) -> Result<Var> {
    let h = rmsnorm(g, x, block.attn_norm, eps)?;
    let q = g.matmul(h, block.wq)?;
    let q = g.split_heads(q, heads)?;
    let q = rope_apply(g, q, positions, theta)?;
    let k = g.matmul(h, block.wk)?;
    let k = g.split_heads(k, heads)?;
    let k = rope_apply(g, k, positions, theta)?;
    let v = g.matmul(h, block.wv)?;
    let v = g.split_heads(v, heads)?;
    let a = g.attention(q, k, v, mask)?;
    let a = g.merge_heads(a)?;
    let a = g.matmul(a, block.wo)?;
    g.add(x, a)
}

/// Pre-norm SwiGLU sub-layer with residual.
pub fn ffn_block<T: Real>(g: &mut Graph<T>, x: Var, block: &BlockVars, eps: f64) -> Result<Var> {
    let h = rmsnorm(g, x, block.ffn_norm, eps)?;
    let f = swiglu_ffn(g, h, block.w_gate, block.w_up, block.w_down)?;
    g.add(x, f)
}

/// Dense mask from a `(batch, query, key)` visibility predicate.
pub fn dense_mask(batch: usize, len: usize, visible: impl Fn(usize, usize, usize) -> bool) -> Result<AttentionMask> {
    let mut v = Vec::with_capacity(batch * len * len);
    for b in 0..batch {
        for i in 0..len {
            for j in 0..len {
                v.push(visible(b, i, j));
            }
        }
    }
    AttentionMask::dense(batch, len, v).map_err(|e| match e {
        Error::Contract(m) => Error::Contract(format!("fully masked query row: {m}")),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn rms(x: &[f64], gamma: &[f64], eps: f64) -> Vec<f64> {
        let mut g = Graph::<f64>::new();
        let xv = g.constant(Tensor::from_f64(&[x.len()], x).unwrap());
        let gv = g.constant(Tensor::from_f64(&[gamma.len()], gamma).unwrap());
        let y = rmsnorm(&mut g, xv, gv, eps).unwrap();
        g.value(y).to_f64_vec()
    }

    #[test]
    fn rmsnorm_examples() {
        assert_eq!(rms(&[3.0; 4], &[1.0; 4], 0.0), vec![1.0; 4]);
        assert_eq!(rms(&[1.0, 0.0, 0.0, 0.0], &[1.0; 4], 0.0), vec![2.0, 0.0, 0.0, 0.0]);
        let x = [0.3, -1.2, 2.5, 0.01];
        let a = rms(&x, &[1.0; 4], 0.0);
        let b = rms(&x.map(|v| v * 7.5), &[1.0; 4], 0.0);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn rmsnorm_scale_invariance_is_approached_with_eps() {
        let x = [0.3, -1.2, 2.5, 0.01];
        let base = rms(&x, &[1.0; 4], 0.0);
        let mut last = f64::INFINITY;
        for alpha in [1.0, 10.0, 100.0, 1000.0] {
            let y = rms(&x.map(|v| v * alpha), &[1.0; 4], 1e-2);
            let dist: f64 = y.iter().zip(&base).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(dist < last);
            last = dist;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn rope_quarter_turn() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1, 1, 1, 2], &[1.0, 0.0]).unwrap());
        let y = g.rope_at(x, &[std::f64::consts::FRAC_PI_2], 12345.0).unwrap();
        let d = g.value(y).data();
        assert!(d[0].abs() < 1e-12 && (d[1] - 1.0).abs() < 1e-12, "{d:?}");
    }

    #[test]
    fn rope_position_zero_is_identity_and_odd_dim_fails() {
        let mut g = Graph::<f64>::new();
        let data = [0.4, -0.2, 1.5, 2.0];
        let x = g.constant(Tensor::from_f64(&[1, 1, 1, 4], &data).unwrap());
        let y = rope_apply(&mut g, x, &[0], 10_000.0).unwrap();
        assert_eq!(g.value(y).data(), &data);
        let x = g.constant(Tensor::from_f64(&[1, 1, 1, 3], &[1.0, 2.0, 3.0]).unwrap());
        assert!(matches!(rope_apply(&mut g, x, &[0], 10_000.0), Err(Error::Config(_))));
    }

    #[test]
    fn swiglu_scalar_and_zero() {
        let mut g = Graph::<f64>::new();
        let one = Tensor::from_f64(&[1, 1], &[1.0]).unwrap();
        let x = g.constant(one.clone());
        let w = g.constant(one);
        let y = swiglu_ffn(&mut g, x, w, w, w).unwrap();
        let want = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((g.value(y).data()[0] - want).abs() < 1e-15);
        assert!((want - 0.731059).abs() < 1e-6);

        let x = g.constant(Tensor::zeros(&[2, 3]));
        let wg = g.constant(Tensor::full(&[3, 4], 0.7));
        let wd = g.constant(Tensor::full(&[4, 3], -0.3));
        let y = swiglu_ffn(&mut g, x, wg, wg, wd).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let err = dense_mask(1, 3, |_, i, j| i != 1 && i == j).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
