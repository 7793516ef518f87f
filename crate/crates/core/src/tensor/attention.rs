//! Multi-head scaled dot-product attention kernels.
//!
//! Inputs are `[batch, seq, dim]` row-major; head `h` owns columns
//! `h * dh .. (h + 1) * dh`. Per (batch, head) block the operands are strided
//! views with row stride `dim`, so no head split/merge copies are needed.

use super::graph::softmax_strided;
use super::Element;

pub(crate) fn forward<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    batch: usize,
    seq: usize,
    dim: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>) {
    let dh = dim / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); batch * seq * dim];
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let base = b * seq * dim + h * dh;
            let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
            // S = q k^T * scale
            T::gemm(seq, dh, seq, scale, &q[base..], dim, 1, &k[base..], 1, dim, T::zero(), p, seq);
            softmax_strided(p, seq, seq, 1);
            // O = P v
            T::gemm(seq, seq, dh, T::one(), p, seq, 1, &v[base..], dim, 1, T::zero(), &mut out[base..], dim);
        }
    }
    (out, probs)
}

pub(crate) fn backward<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    (batch, seq, dim, heads): (usize, usize, usize, usize),
    (dq, dk, dv): (&mut [T], &mut [T], &mut [T]),
) {
    let dh = dim / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut dp = vec![T::zero(); seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let base = b * seq * dim + h * dh;
            let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
            // dV += P^T dO
            T::gemm(seq, seq, dh, T::one(), p, 1, seq, &dout[base..], dim, 1, T::one(), &mut dv[base..], dim);
            // dP = dO V^T
            T::gemm(seq, dh, seq, T::one(), &dout[base..], dim, 1, &v[base..], 1, dim, T::zero(), &mut dp, seq);
            // dS = P * (dP - rowsum(dP * P)), folded with the score scale
            for r in 0..seq {
                let row = r * seq;
                let dot = (0..seq).map(|c| dp[row + c] * p[row + c]).sum::<T>();
                for c in 0..seq {
                    dp[row + c] = p[row + c] * (dp[row + c] - dot) * scale;
                }
            }
            // dQ += dS K ; dK += dS^T Q
            T::gemm(seq, seq, dh, T::one(), &dp, seq, 1, &k[base..], dim, 1, T::one(), &mut dq[base..], dim);
            T::gemm(seq, seq, dh, T::one(), &dp, 1, seq, &q[base..], dim, 1, T::one(), &mut dk[base..], dim);
        }
    }
}
