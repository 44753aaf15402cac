//! Teacher-supervised training of the salience head over fresh toy
//! rollouts: causal features in, bidirectional-teacher salience as the
//! regression target.

use crate::attention::AttentionBatch;
use crate::error::Result;
use crate::metrics::topk_overlap;
use crate::rng::Rng;
use crate::seh::{seh_forward, seh_train_step, OptimizerState, SehParams};
use crate::tensor::Tensor;

use super::model::ToyModel;
use super::rollout::{rollout_infer, teacher_salience, ChunkQkv, RolloutOptions};
use super::schedule::DenoiseSchedule;

const STREAM_TRAIN: u64 = 0x7247;

#[derive(Debug, Clone, Default)]
pub struct TrainCurves {
    /// Pre-update SmoothL1 loss per step.
    pub losses: Vec<f64>,
    /// Top-(L/2) index overlap between prediction and teacher per step.
    pub overlaps: Vec<f64>,
}

/// One step = one fresh causal rollout, one bidirectional teacher pass over
/// the rollout's final states, one optimizer update on the SmoothL1 between
/// the head's predictions (from the causal final-layer q/k/v) and the
/// teacher scores. The teacher's block length is the chunk token count.
#[allow(clippy::too_many_arguments)]
pub fn train_seh_loop(
    model: &ToyModel,
    sched: &DenoiseSchedule,
    opts: &RolloutOptions,
    params: &mut SehParams,
    opt: &mut OptimizerState,
    steps: usize,
    frames_per_rollout: usize,
    smooth_l1_beta: f64,
    seed: u64,
) -> Result<TrainCurves> {
    let mut curves = TrainCurves::default();
    let cfg = model.config();
    let (n, d) = (cfg.heads, cfg.head_dim);

    for step in 0..steps {
        let rollout_seed = Rng::derive(seed, &[STREAM_TRAIN, step as u64]).next_u64();
        // The rollout scores its chunks with the current head, as the cache
        // would at inference; a snapshot keeps the borrow disjoint from the
        // update below.
        let snapshot = params.clone();
        let trace = rollout_infer(
            model,
            sched,
            opts,
            frames_per_rollout,
            rollout_seed,
            Some(&snapshot),
        )?;

        let full_states: Vec<f64> = trace.chunk_states.iter().flatten().copied().collect();
        let target = teacher_salience(
            model,
            &full_states,
            model.chunk_tokens(),
            opts.head_reduce,
        )?;

        let batch = concat_chunk_qkv(&trace.chunk_qkv, n, d)?;
        let pred = seh_forward(&batch, params)?;
        let l = target.seq_len();
        let k = (l / 2).max(1);
        let overlap = topk_overlap(pred.row(0), target.row(0), k)?;

        let loss = seh_train_step(params, opt, &batch, &target, smooth_l1_beta)?;
        curves.losses.push(loss);
        curves.overlaps.push(overlap);
    }
    Ok(curves)
}

/// Concatenate per-chunk final-layer activations along the token axis into
/// one `[1, N, L, D]` batch.
pub fn concat_chunk_qkv(chunks: &[ChunkQkv], n: usize, d: usize) -> Result<AttentionBatch> {
    let l: usize = chunks.iter().map(|c| c.t_len).sum();
    let mut q = vec![0.0; n * l * d];
    let mut k = vec![0.0; n * l * d];
    let mut v = vec![0.0; n * l * d];
    let mut offset = 0;
    for c in chunks {
        for ni in 0..n {
            for t in 0..c.t_len {
                let dst = (ni * l + offset + t) * d;
                let src = (ni * c.t_len + t) * d;
                q[dst..dst + d].copy_from_slice(&c.q[src..src + d]);
                k[dst..dst + d].copy_from_slice(&c.k[src..src + d]);
                v[dst..dst + d].copy_from_slice(&c.v[src..src + d]);
            }
        }
        offset += c.t_len;
    }
    let dims = [1, n, l, d];
    AttentionBatch::new(
        Tensor::from_vec(&dims, q)?,
        Tensor::from_vec(&dims, k)?,
        Tensor::from_vec(&dims, v)?,
    )
}
