// Batched matrix products on top of matrixmultiply's strided gemm.

use rayon::prelude::*;

use super::Scalar;
use crate::error::{Error, Result};

// Below this many multiply-adds per batch entry, rayon overhead dominates.
const PAR_THRESHOLD: usize = 1 << 15;

/// Resolved geometry of `a · b` (or `a · bᵀ`) with broadcast batch dims.
#[derive(Clone, Debug)]
pub(crate) struct MatmulPlan {
    pub out_shape: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub trans_b: bool,
    a_offsets: Vec<usize>,
    b_offsets: Vec<usize>,
    a_broadcast: bool,
    b_broadcast: bool,
}

impl MatmulPlan {
    pub fn new(a_shape: &[usize], b_shape: &[usize], trans_b: bool) -> Result<Self> {
        if a_shape.len() < 2 || b_shape.len() < 2 {
            return Err(Error::shape(format!(
                "matmul needs rank >= 2 operands, got {a_shape:?} and {b_shape:?}"
            )));
        }
        let (ab, am) = a_shape.split_at(a_shape.len() - 2);
        let (bb, bm) = b_shape.split_at(b_shape.len() - 2);
        let (m, k) = (am[0], am[1]);
        let (kb, n) = if trans_b {
            (bm[1], bm[0])
        } else {
            (bm[0], bm[1])
        };
        if k != kb {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {a_shape:?} · {b_shape:?}{}",
                if trans_b { "ᵀ" } else { "" }
            )));
        }

        let rank = ab.len().max(bb.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(ab), pad(bb));
        let mut batch = Vec::with_capacity(rank);
        for (i, (&x, &y)) in pa.iter().zip(&pb).enumerate() {
            if x != y && x != 1 && y != 1 {
                return Err(Error::shape(format!(
                    "matmul batch dim {i} not broadcastable: {a_shape:?} vs {b_shape:?}"
                )));
            }
            batch.push(x.max(y));
        }

        let count: usize = batch.iter().product();
        let strides = |padded: &[usize], block: usize| -> Vec<usize> {
            // element stride per batch dim, zero where broadcast
            let mut s = vec![0; rank];
            let mut acc = block;
            for d in (0..rank).rev() {
                s[d] = if padded[d] == 1 { 0 } else { acc };
                acc *= padded[d];
            }
            s
        };
        let sa = strides(&pa, m * k);
        let sb = strides(&pb, k * n);
        let mut a_offsets = Vec::with_capacity(count);
        let mut b_offsets = Vec::with_capacity(count);
        let mut idx = vec![0usize; rank];
        for _ in 0..count {
            a_offsets.push(idx.iter().zip(&sa).map(|(i, s)| i * s).sum());
            b_offsets.push(idx.iter().zip(&sb).map(|(i, s)| i * s).sum());
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < batch[d] {
                    break;
                }
                idx[d] = 0;
            }
        }

        let mut out_shape = batch;
        out_shape.push(m);
        out_shape.push(n);
        let a_count: usize = pa.iter().product();
        let b_count: usize = pb.iter().product();
        Ok(MatmulPlan {
            out_shape,
            m,
            k,
            n,
            trans_b,
            a_offsets,
            b_offsets,
            a_broadcast: a_count != count,
            b_broadcast: b_count != count,
        })
    }

    fn batches(&self) -> usize {
        self.a_offsets.len()
    }

    fn b_strides(&self) -> (isize, isize) {
        if self.trans_b {
            (1, self.k as isize)
        } else {
            (self.n as isize, 1)
        }
    }

    pub fn forward<T: Scalar>(&self, a: &[T], b: &[T]) -> Vec<T> {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut out = vec![T::zero(); self.batches() * m * n];
        let (rsb, csb) = self.b_strides();
        let run = |(i, c): (usize, &mut [T])| {
            let ap = a[self.a_offsets[i]..].as_ptr();
            let bp = b[self.b_offsets[i]..].as_ptr();
            // SAFETY: offsets and strides come from validated shapes; `c` is an
            // exclusive m×n chunk.
            unsafe {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    ap,
                    k as isize,
                    1,
                    bp,
                    rsb,
                    csb,
                    T::zero(),
                    c.as_mut_ptr(),
                    n as isize,
                    1,
                )
            }
        };
        if self.batches() > 1 && m * k * n >= PAR_THRESHOLD {
            out.par_chunks_mut(m * n).enumerate().for_each(run);
        } else {
            out.chunks_mut(m * n).enumerate().for_each(run);
        }
        out
    }

    /// Accumulate `∂a += g·bᵀ` (or `g·b` when `b` is transposed).
    pub fn backward_a<T: Scalar>(&self, b: &[T], g: &[T], ga: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        // bᵀ viewed as an n×k matrix
        let (rs, cs) = if self.trans_b {
            (k as isize, 1)
        } else {
            (1, n as isize)
        };
        let run = |i: usize, dst: *mut T| {
            let gp = g[i * m * n..].as_ptr();
            let bp = b[self.b_offsets[i]..].as_ptr();
            // SAFETY: see `forward`; `dst` addresses an m×k block of `ga`.
            unsafe {
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    gp,
                    n as isize,
                    1,
                    bp,
                    rs,
                    cs,
                    T::one(),
                    dst,
                    k as isize,
                    1,
                )
            }
        };
        if !self.a_broadcast && self.batches() > 1 && m * k * n >= PAR_THRESHOLD {
            ga.par_chunks_mut(m * k)
                .enumerate()
                .for_each(|(i, c)| run(i, c.as_mut_ptr()));
        } else {
            for i in 0..self.batches() {
                let dst = ga[self.a_offsets[i]..].as_mut_ptr();
                run(i, dst);
            }
        }
    }

    /// Accumulate `∂b += aᵀ·g` (or `gᵀ·a` when `b` is transposed).
    pub fn backward_b<T: Scalar>(&self, a: &[T], g: &[T], gb: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        let run = |i: usize, dst: *mut T| {
            let gp = g[i * m * n..].as_ptr();
            let ap = a[self.a_offsets[i]..].as_ptr();
            // SAFETY: see `forward`; `dst` addresses a k×n (or n×k) block of `gb`.
            unsafe {
                if self.trans_b {
                    // gᵀ (n×m) · a (m×k) → n×k
                    T::gemm(
                        n,
                        m,
                        k,
                        T::one(),
                        gp,
                        1,
                        n as isize,
                        ap,
                        k as isize,
                        1,
                        T::one(),
                        dst,
                        k as isize,
                        1,
                    )
                } else {
                    // aᵀ (k×m) · g (m×n) → k×n
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        ap,
                        1,
                        k as isize,
                        gp,
                        n as isize,
                        1,
                        T::one(),
                        dst,
                        n as isize,
                        1,
                    )
                }
            }
        };
        if !self.b_broadcast && self.batches() > 1 && m * k * n >= PAR_THRESHOLD {
            gb.par_chunks_mut(k * n)
                .enumerate()
                .for_each(|(i, c)| run(i, c.as_mut_ptr()));
        } else {
            for i in 0..self.batches() {
                let dst = gb[self.b_offsets[i]..].as_mut_ptr();
                run(i, dst);
            }
        }
    }
}
