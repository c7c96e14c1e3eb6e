//! Ring self-attention: Q stays put, K then V circulate around the ring
//! so every rank assembles full attention rows for its sequence shard.

use thiserror::Error;

use crate::comm::{run_ranks, CommError, CommLedger, Scheduler};
use crate::mesh::{build_mesh, groups_along, ParallelMode};
use crate::tensor::DenseTensor;

#[derive(Debug, Error)]
pub enum RingError {
    #[error("sequence length {seq} not divisible by ring size {ring}")]
    IndivisibleSequence { seq: usize, ring: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Comm(#[from] CommError),
}

pub struct RingAttentionRun {
    /// Scaled raw scores Q K^T / sqrt(d_k) before softmax, [s, s].
    pub scores: DenseTensor,
    /// Row-softmaxed attention matrix, [s, s].
    pub attention: DenseTensor,
    /// Attention output A V, [s, d_k].
    pub output: DenseTensor,
    pub ledger: CommLedger,
}

/// Single-head attention over `n` ranks holding contiguous sequence
/// shards. Two ring passes of n-1 shifts each: the first circulates K
/// shards to assemble all raw score columns (softmax is applied only
/// once every column is present), the second circulates V shards.
pub fn run_ring_attention(
    n: usize,
    sched: Scheduler,
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
) -> Result<RingAttentionRun, RingError> {
    let (s, dk) = match q.shape() {
        [s, d] => (*s, *d),
        sh => return Err(RingError::ShapeMismatch(format!("Q: expected matrix, got {sh:?}"))),
    };
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(RingError::ShapeMismatch(format!(
            "Q{:?}, K{:?}, V{:?} must agree",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if n == 0 || s % n != 0 {
        return Err(RingError::IndivisibleSequence { seq: s, ring: n });
    }
    let sl = s / n;
    let scale = 1.0 / (dk as f64).sqrt();
    let mesh = build_mesh(ParallelMode::Sequence, n).expect("1D mesh");
    let ring = groups_along(&mesh, "ring").expect("ring axis").pop().expect("ring group");

    let run = run_ranks(n, sched, |ctx| {
        let r = ctx.rank();
        let rows = (r * sl, (r + 1) * sl);
        let ql = q.slice_block(rows, (0, dk));
        let kl = k.slice_block(rows, (0, dk));
        let vl = v.slice_block(rows, (0, dk));

        // Pass 1: raw scores. After t shifts we hold the K shard that
        // originated at rank (r - t) mod n.
        let mut raw = DenseTensor::zeros(vec![sl, s]);
        let mut cur_k = kl;
        for t in 0..n {
            if t > 0 {
                cur_k = ctx.ring_shift(&ring, &cur_k)?;
            }
            let origin = (r + n - t) % n;
            let block = ql.matmul(&cur_k.transpose())?.scale(scale);
            raw.put_block(0, origin * sl, &block);
        }
        let attn = raw.softmax_rows();

        // Pass 2: output accumulation against circulating V shards.
        let mut out = DenseTensor::zeros(vec![sl, dk]);
        let mut cur_v = vl;
        for t in 0..n {
            if t > 0 {
                cur_v = ctx.ring_shift(&ring, &cur_v)?;
            }
            let origin = (r + n - t) % n;
            let cols = attn.slice_block((0, sl), (origin * sl, (origin + 1) * sl));
            out.add_assign(&cols.matmul(&cur_v)?)?;
        }
        Ok((raw, attn, out))
    })?;

    let mut scores = DenseTensor::zeros(vec![s, s]);
    let mut attention = DenseTensor::zeros(vec![s, s]);
    let mut output = DenseTensor::zeros(vec![s, dk]);
    for (r, (raw, attn, out)) in run.results.iter().enumerate() {
        scores.put_block(r * sl, 0, raw);
        attention.put_block(r * sl, 0, attn);
        output.put_block(r * sl, 0, out);
    }
    Ok(RingAttentionRun { scores, attention, output, ledger: run.ledger })
}

/// Serial single-head attention, used as the correctness oracle.
pub fn serial_attention(
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
) -> (DenseTensor, DenseTensor) {
    let dk = q.shape()[1] as f64;
    let attn = q
        .matmul(&k.transpose())
        .expect("shapes checked by caller")
        .scale(1.0 / dk.sqrt())
        .softmax_rows();
    let out = attn.matmul(v).expect("shapes checked by caller");
    (attn, out)
}
