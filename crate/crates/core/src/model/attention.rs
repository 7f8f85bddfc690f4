//! Multi-head scaled dot-product attention over packed `[batch*len, heads*head_dim]` buffers.

use super::kernels::{gemm, masked_softmax_row, Real, View};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// Every valid key is visible.
    Full,
    /// Query `i` sees keys `j <= i`.
    Causal,
    /// The first `n` positions form a bidirectional prefix; later positions
    /// see the whole prefix plus a causal window over the suffix.
    Prefix(usize),
}

impl MaskKind {
    #[inline]
    fn allows(self, i: usize, j: usize) -> bool {
        match self {
            MaskKind::Full => true,
            MaskKind::Causal => j <= i,
            MaskKind::Prefix(n) => j < n || (i >= n && j <= i),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttnDims {
    pub heads: usize,
    pub head_dim: usize,
    pub lq: usize,
    pub lk: usize,
}

impl AttnDims {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Keys/values of query-batch entry `b` live at kv-batch entry `kv_map[b]`;
/// `key_valid` is indexed `[kv_batch * lk + j]`.
pub struct AttnInputs<'a, T> {
    pub q: &'a [T],
    pub k: &'a [T],
    pub v: &'a [T],
    pub kv_map: &'a [usize],
    pub key_valid: &'a [bool],
    pub kind: MaskKind,
    pub dims: AttnDims,
}

/// Returns `(output, probabilities)`; probabilities are laid out
/// `[(b * heads + h) * lq * lk]`.
pub fn attention_forward<T: Real>(inp: &AttnInputs<'_, T>) -> (Vec<T>, Vec<T>) {
    let AttnDims { heads, head_dim, lq, lk } = inp.dims;
    let w = inp.dims.width();
    let batch = inp.kv_map.len();
    let scale = T::one() / T::lit(head_dim as f64).sqrt();
    let mut out = vec![T::zero(); batch * lq * w];
    let mut probs = vec![T::zero(); batch * heads * lq * lk];
    if lq == 0 {
        return (out, probs);
    }
    for b in 0..batch {
        let kb = inp.kv_map[b];
        let valid = &inp.key_valid[kb * lk..(kb + 1) * lk];
        for h in 0..heads {
            let pofs = (b * heads + h) * lq * lk;
            let qv = View { offset: b * lq * w + h * head_dim, rows: lq, cols: head_dim, rs: w, cs: 1 };
            let kv = View { offset: kb * lk * w + h * head_dim, rows: lk, cols: head_dim, rs: w, cs: 1 };
            let pv = View::rowmajor(pofs, lq, lk, lk);
            gemm(scale, inp.q, qv, inp.k, kv.t(), T::zero(), &mut probs, pv);
            for i in 0..lq {
                let row = &mut probs[pofs + i * lk..pofs + (i + 1) * lk];
                masked_softmax_row(row, |j| valid[j] && inp.kind.allows(i, j));
            }
            let ov = View { offset: b * lq * w + h * head_dim, rows: lq, cols: head_dim, rs: w, cs: 1 };
            gemm(T::one(), &probs, pv, inp.v, kv, T::zero(), &mut out, ov);
        }
    }
    (out, probs)
}

/// Gradients `(dq, dk, dv)` given the upstream gradient of the output.
pub fn attention_backward<T: Real>(
    inp: &AttnInputs<'_, T>,
    probs: &[T],
    dout: &[T],
    kv_batch: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttnDims { heads, head_dim, lq, lk } = inp.dims;
    let w = inp.dims.width();
    let batch = inp.kv_map.len();
    let scale = T::one() / T::lit(head_dim as f64).sqrt();
    let mut dq = vec![T::zero(); batch * lq * w];
    let mut dk = vec![T::zero(); kv_batch * lk * w];
    let mut dv = vec![T::zero(); kv_batch * lk * w];
    let mut dp = vec![T::zero(); lq * lk];
    if lq == 0 || lk == 0 {
        return (dq, dk, dv);
    }
    for b in 0..batch {
        let kb = inp.kv_map[b];
        for h in 0..heads {
            let pofs = (b * heads + h) * lq * lk;
            let pv = View::rowmajor(pofs, lq, lk, lk);
            let qv = View { offset: b * lq * w + h * head_dim, rows: lq, cols: head_dim, rs: w, cs: 1 };
            let kv = View { offset: kb * lk * w + h * head_dim, rows: lk, cols: head_dim, rs: w, cs: 1 };
            let local = View::rowmajor(0, lq, lk, lk);
            // dP = dO·Vᵀ
            gemm(T::one(), dout, qv, inp.v, kv.t(), T::zero(), &mut dp, local);
            // dV += Pᵀ·dO
            gemm(T::one(), probs, pv.t(), dout, qv, T::one(), &mut dv, kv);
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale
            for i in 0..lq {
                let p = &probs[pofs + i * lk..pofs + (i + 1) * lk];
                let g = &mut dp[i * lk..(i + 1) * lk];
                let dot: T = p.iter().zip(g.iter()).map(|(&a, &b)| a * b).sum();
                for (gj, &pj) in g.iter_mut().zip(p) {
                    *gj = pj * (*gj - dot) * scale;
                }
            }
            // dQ += dS·K ; dK += dSᵀ·Q
            gemm(T::one(), &dp, local, inp.k, kv, T::one(), &mut dq, qv);
            gemm(T::one(), &dp, local.t(), inp.q, qv, T::one(), &mut dk, kv);
        }
    }
    (dq, dk, dv)
}
