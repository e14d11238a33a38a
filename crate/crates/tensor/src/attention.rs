//! Fused causal multi-head attention kernels.
//!
//! Input rows are `[q | k | v]` with `d` columns each; head `h` owns columns
//! `h*dh..(h+1)*dh` inside every block. Work is split per (batch, head) and the
//! partial results are merged in a fixed order, so the output does not depend
//! on the rayon pool size.

use rayon::prelude::*;

use crate::graph::softmax_in_place;
use crate::real::{gemm, Real, View};

pub(crate) fn forward<F: Real>(qkv: &[F], batch: usize, seq: usize, heads: usize, d: usize) -> (Vec<F>, Vec<F>) {
    let dh = d / heads;
    let rs = 3 * d;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let mut probs = vec![F::zero(); batch * heads * seq * seq];
    let locals: Vec<Vec<F>> = probs
        .par_chunks_mut(seq * seq)
        .enumerate()
        .map(|(bh, p)| {
            let (b, h) = (bh / heads, bh % heads);
            let base = b * seq * rs + h * dh;
            let q = View::rm(qkv, base, seq, dh, rs);
            let k = View::rm(qkv, base + d, seq, dh, rs);
            let v = View::rm(qkv, base + 2 * d, seq, dh, rs);
            gemm(q, k.t(), p, seq, false);
            for i in 0..seq {
                let row = &mut p[i * seq..(i + 1) * seq];
                row[..=i].iter_mut().for_each(|x| *x *= scale);
                softmax_in_place(&mut row[..=i]);
                row[i + 1..].fill(F::zero());
            }
            let mut o = vec![F::zero(); seq * dh];
            gemm(View::rm(p, 0, seq, seq, seq), v, &mut o, dh, false);
            o
        })
        .collect();
    let mut out = vec![F::zero(); batch * seq * d];
    for (bh, o) in locals.iter().enumerate() {
        let (b, h) = (bh / heads, bh % heads);
        for i in 0..seq {
            let dst = (b * seq + i) * d + h * dh;
            out[dst..dst + dh].copy_from_slice(&o[i * dh..(i + 1) * dh]);
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<F: Real>(
    qkv: &[F],
    probs: &[F],
    dout: &[F],
    dqkv: &mut [F],
    batch: usize,
    seq: usize,
    heads: usize,
    d: usize,
) {
    let dh = d / heads;
    let rs = 3 * d;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let locals: Vec<[Vec<F>; 3]> = (0..batch * heads)
        .into_par_iter()
        .map(|bh| {
            let (b, h) = (bh / heads, bh % heads);
            let base = b * seq * rs + h * dh;
            let q = View::rm(qkv, base, seq, dh, rs);
            let k = View::rm(qkv, base + d, seq, dh, rs);
            let v = View::rm(qkv, base + 2 * d, seq, dh, rs);
            let p = &probs[bh * seq * seq..(bh + 1) * seq * seq];
            let pv = View::rm(p, 0, seq, seq, seq);
            let dov = View::rm(dout, b * seq * d + h * dh, seq, dh, d);

            let mut dv = vec![F::zero(); seq * dh];
            gemm(pv.t(), dov, &mut dv, dh, false);

            let mut ds = vec![F::zero(); seq * seq];
            gemm(dov, v.t(), &mut ds, seq, false);
            for i in 0..seq {
                let pr = &p[i * seq..(i + 1) * seq];
                let dr = &mut ds[i * seq..(i + 1) * seq];
                let dot = pr[..=i].iter().zip(&dr[..=i]).map(|(&a, &b)| a * b).sum::<F>();
                for j in 0..=i {
                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                }
                dr[i + 1..].fill(F::zero());
            }
            let dsv = View::rm(&ds, 0, seq, seq, seq);
            let mut dq = vec![F::zero(); seq * dh];
            gemm(dsv, k, &mut dq, dh, false);
            let mut dk = vec![F::zero(); seq * dh];
            gemm(dsv.t(), q, &mut dk, dh, false);
            [dq, dk, dv]
        })
        .collect();
    for (bh, parts) in locals.iter().enumerate() {
        let (b, h) = (bh / heads, bh % heads);
        for (block, part) in parts.iter().enumerate() {
            for i in 0..seq {
                let dst = (b * seq + i) * rs + block * d + h * dh;
                for (g, &x) in dqkv[dst..dst + dh].iter_mut().zip(&part[i * dh..(i + 1) * dh]) {
                    *g += x;
                }
            }
        }
    }
}
