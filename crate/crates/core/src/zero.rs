//! ZeRO-style redundancy-eliminated data parallelism: the three sharding
//! stages over the simulated fabric, per-rank memory models, an
//! allocation ledger for the fp16 gradient/parameter reuse plan, and
//! greedy host/device placement.

use thiserror::Error;

use crate::comm::{run_ranks, CommError, CommLedger, LedgerChannel, Scheduler};
use crate::mesh::{build_mesh, groups_along, ParallelMode};
use crate::tensor::DenseTensor;

const PARAM_BYTES: u128 = 2; // fp16 parameters
const GRAD_BYTES: u128 = 2; // fp16 gradients
const OPT_BYTES: u128 = 12; // fp32 master copy + two Adam moments

#[derive(Debug, Error)]
pub enum ZeroError {
    #[error("invalid ZeRO stage {0}; expected 1, 2 or 3")]
    InvalidStage(u8),
    #[error("parameter count {len} not divisible by {ranks} ranks")]
    IndivisibleParams { len: usize, ranks: usize },
    #[error("model has no submodules")]
    EmptyModel,
    #[error(transparent)]
    Comm(#[from] CommError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ZeroStage {
    /// Optimizer states sharded.
    One,
    /// Optimizer states and gradients sharded.
    Two,
    /// Optimizer states, gradients and parameters sharded.
    Three,
}

impl ZeroStage {
    pub fn from_u8(s: u8) -> Result<Self, ZeroError> {
        match s {
            1 => Ok(ZeroStage::One),
            2 => Ok(ZeroStage::Two),
            3 => Ok(ZeroStage::Three),
            other => Err(ZeroError::InvalidStage(other)),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub bias_correction: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, bias_correction: true }
    }
}

/// Adam update on one parameter slice, bias-corrected when enabled.
fn adam_update(
    cfg: &AdamConfig,
    step: usize,
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
) {
    let (bc1, bc2) = if cfg.bias_correction {
        (1.0 - cfg.beta1.powi(step as i32), 1.0 - cfg.beta2.powi(step as i32))
    } else {
        (1.0, 1.0)
    };
    for i in 0..params.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grads[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// One rank's training state: the full parameter view it can currently
/// see, plus the optimizer shard it owns ([lo, lo+len) of the flat
/// parameter vector).
pub struct TrainState {
    pub params: Vec<f64>,
    pub shard: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lo: usize,
}

impl TrainState {
    pub fn new(init: &[f64], lo: usize, len: usize) -> Self {
        TrainState {
            params: init.to_vec(),
            shard: init[lo..lo + len].to_vec(),
            m: vec![0.0; len],
            v: vec![0.0; len],
            lo,
        }
    }

    pub fn owned_len(&self) -> usize {
        self.shard.len()
    }

    /// Apply one optimizer step to the owned slice of the full view,
    /// keeping the standalone shard copy in sync.
    fn update_owned(&mut self, cfg: &AdamConfig, step: usize, mean_grads: &[f64]) {
        let (lo, hi) = (self.lo, self.lo + self.shard.len());
        adam_update(cfg, step, &mut self.params[lo..hi], mean_grads, &mut self.m, &mut self.v);
        self.shard.copy_from_slice(&self.params[lo..hi]);
    }

    /// Apply one optimizer step to the shard alone (stage 3, where the
    /// full view is only materialized by gathers).
    fn update_shard(&mut self, cfg: &AdamConfig, step: usize, mean_grads: &[f64]) {
        adam_update(cfg, step, &mut self.shard, mean_grads, &mut self.m, &mut self.v);
    }
}

pub struct ZeroRun {
    /// Full parameter vector after each optimizer step.
    pub params_per_step: Vec<Vec<f64>>,
    pub ledger: CommLedger,
}

/// Runs `steps` optimizer steps across `n` data-parallel ranks. The
/// per-rank gradient is `grad_fn(rank, step, params)`; ranks combine
/// gradients by averaging, so the equivalent serial update uses the
/// mean of the per-rank gradients.
///
/// Per-step collectives:
///   stage 1: all_reduce(grads) + all_gather(updated param shards)
///   stage 2: reduce_scatter(grads) + all_gather(updated param shards)
///   stage 3: all_gather(params) twice (forward, then backward
///            rematerialization) + reduce_scatter(grads)
pub fn run_zero<G>(
    stage: ZeroStage,
    n: usize,
    sched: Scheduler,
    init: &[f64],
    cfg: &AdamConfig,
    steps: usize,
    grad_fn: G,
) -> Result<ZeroRun, ZeroError>
where
    G: Fn(usize, usize, &[f64]) -> Vec<f64> + Sync,
{
    let p = init.len();
    if n == 0 || p % n != 0 {
        return Err(ZeroError::IndivisibleParams { len: p, ranks: n });
    }
    let sl = p / n;
    let mesh = build_mesh(ParallelMode::DataParallel, n).expect("1D mesh");
    let ring = groups_along(&mesh, "ring").expect("ring axis").pop().expect("ring group");

    let run = run_ranks(n, sched, |ctx| {
        let r = ctx.rank();
        let mut st = TrainState::new(init, r * sl, sl);
        let mut trace = Vec::with_capacity(steps);

        for step in 1..=steps {
            let (lo, hi) = (st.lo, st.lo + st.owned_len());
            match stage {
                ZeroStage::One => {
                    let g = grad_fn(r, step, &st.params);
                    let summed =
                        ctx.all_reduce(&ring, &DenseTensor::new(vec![p], g)?)?;
                    let mean: Vec<f64> =
                        summed.data()[lo..hi].iter().map(|x| x / n as f64).collect();
                    st.update_owned(cfg, step, &mean);
                    let slice = DenseTensor::new(vec![sl], st.shard.clone())?;
                    st.params = ctx.all_gather(&ring, &slice)?.data().to_vec();
                }
                ZeroStage::Two => {
                    let g = grad_fn(r, step, &st.params);
                    let summed =
                        ctx.reduce_scatter(&ring, &DenseTensor::new(vec![p], g)?)?;
                    let mean: Vec<f64> = summed.data().iter().map(|x| x / n as f64).collect();
                    st.update_owned(cfg, step, &mean);
                    let slice = DenseTensor::new(vec![sl], st.shard.clone())?;
                    st.params = ctx.all_gather(&ring, &slice)?.data().to_vec();
                }
                ZeroStage::Three => {
                    let mine = DenseTensor::new(vec![sl], st.shard.clone())?;
                    let full = ctx.all_gather(&ring, &mine)?;
                    // Backward rematerializes parameters with a second gather.
                    let _ = ctx.all_gather(&ring, &mine)?;
                    let g = grad_fn(r, step, full.data());
                    let summed =
                        ctx.reduce_scatter(&ring, &DenseTensor::new(vec![p], g)?)?;
                    let mean: Vec<f64> = summed.data().iter().map(|x| x / n as f64).collect();
                    st.update_shard(cfg, step, &mean);
                    let prev = ctx.channel();
                    ctx.set_channel(LedgerChannel::Verification);
                    let gathered =
                        ctx.all_gather(&ring, &DenseTensor::new(vec![sl], st.shard.clone())?);
                    ctx.set_channel(prev);
                    st.params = gathered?.data().to_vec();
                }
            }
            trace.push(st.params.clone());
        }
        Ok(trace)
    })?;

    let traces = run.results;
    for (r, t) in traces.iter().enumerate().skip(1) {
        assert_eq!(
            t, &traces[0],
            "rank {r} diverged from rank 0; sharded update is not deterministic"
        );
    }
    Ok(ZeroRun { params_per_step: traces.into_iter().next().unwrap(), ledger: run.ledger })
}

/// Bytes of model + optimizer state held per rank, using the standard
/// mixed-precision footprint: 2 B fp16 parameters, 2 B fp16 gradients,
/// 12 B fp32 master parameters and Adam moments (16 B/param total).
pub fn model_data_bytes_per_rank(stage: ZeroStage, params: u128, n: u128) -> u128 {
    let shard = params / n;
    match stage {
        ZeroStage::One => PARAM_BYTES * params + GRAD_BYTES * params + OPT_BYTES * shard,
        ZeroStage::Two => PARAM_BYTES * params + (GRAD_BYTES + OPT_BYTES) * shard,
        ZeroStage::Three => (PARAM_BYTES + GRAD_BYTES + OPT_BYTES) * shard,
    }
}

// ---------------------------------------------------------------------------
// Allocation ledger, reuse plan, placement
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeviceClass {
    Device,
    Host,
}

#[derive(Clone, Debug)]
pub struct MemEvent {
    pub label: String,
    pub device_live: u128,
    pub host_live: u128,
}

/// Live/peak byte accounting per device class plus host<->device
/// transfer totals, with a labelled event trace exportable as CSV.
#[derive(Clone, Debug, Default)]
pub struct MemoryLedger {
    device_live: u128,
    host_live: u128,
    device_peak: u128,
    host_peak: u128,
    transferred: u128,
    events: Vec<MemEvent>,
}

impl MemoryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, class: DeviceClass, bytes: u128) {
        match class {
            DeviceClass::Device => {
                self.device_live += bytes;
                self.device_peak = self.device_peak.max(self.device_live);
            }
            DeviceClass::Host => {
                self.host_live += bytes;
                self.host_peak = self.host_peak.max(self.host_live);
            }
        }
    }

    pub fn free(&mut self, class: DeviceClass, bytes: u128) {
        match class {
            DeviceClass::Device => self.device_live -= bytes,
            DeviceClass::Host => self.host_live -= bytes,
        }
    }

    pub fn transfer(&mut self, bytes: u128) {
        self.transferred += bytes;
    }

    pub fn record(&mut self, label: impl Into<String>) {
        self.events.push(MemEvent {
            label: label.into(),
            device_live: self.device_live,
            host_live: self.host_live,
        });
    }

    pub fn live(&self, class: DeviceClass) -> u128 {
        match class {
            DeviceClass::Device => self.device_live,
            DeviceClass::Host => self.host_live,
        }
    }

    pub fn peak(&self, class: DeviceClass) -> u128 {
        match class {
            DeviceClass::Device => self.device_peak,
            DeviceClass::Host => self.host_peak,
        }
    }

    pub fn transferred(&self) -> u128 {
        self.transferred
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("event,device_live_bytes,host_live_bytes\n");
        for e in &self.events {
            out.push_str(&format!("{},{},{}\n", e.label, e.device_live, e.host_live));
        }
        out
    }
}

pub struct ReusePlan {
    pub peak_bytes: u128,
    pub ledger: MemoryLedger,
}

/// Peak fp16 memory over a forward+backward sweep of submodules with
/// `sizes[i]` parameters each. With reuse enabled each gradient buffer
/// overwrites its parameter buffer in place during backward, halving
/// the peak (2 bytes/element live instead of 4).
pub fn reuse_plan(sizes: &[u128], reuse: bool) -> Result<ReusePlan, ZeroError> {
    if sizes.is_empty() {
        return Err(ZeroError::EmptyModel);
    }
    let mut ledger = MemoryLedger::new();
    for (i, s) in sizes.iter().enumerate() {
        ledger.alloc(DeviceClass::Device, 2 * s);
        ledger.record(format!("fwd param[{i}]"));
    }
    for (i, s) in sizes.iter().enumerate().rev() {
        if reuse {
            // Gradient overwrites the parameter buffer; no net change.
            ledger.record(format!("bwd grad[{i}] reuses param buffer"));
        } else {
            ledger.alloc(DeviceClass::Device, 2 * s);
            ledger.record(format!("bwd grad[{i}]"));
        }
    }
    let peak_bytes = ledger.peak(DeviceClass::Device);
    Ok(ReusePlan { peak_bytes, ledger })
}

pub struct Placement {
    /// One tag per segment, same order as the input.
    pub tags: Vec<DeviceClass>,
    pub device_bytes: u128,
    pub host_bytes: u128,
    /// Param+grad traffic per step for host-resident segments: each
    /// element moves 4 bytes (fp16 param + fp16 grad) in each direction.
    pub transfer_bytes_per_step: u128,
}

/// Greedy host/device split: walk the segments in order, keep each on
/// device while its full footprint (params + grads + optimizer state)
/// fits in the remaining budget; the first segment that does not fit
/// and everything after it live on the host.
pub fn hybrid_place(segment_elems: &[u128], device_budget_bytes: u128) -> Placement {
    let per_elem = PARAM_BYTES + GRAD_BYTES + OPT_BYTES;
    let mut tags = Vec::with_capacity(segment_elems.len());
    let mut device_bytes = 0u128;
    let mut host_bytes = 0u128;
    let mut host_elems = 0u128;
    let mut spilled = false;
    for &elems in segment_elems {
        let footprint = elems * per_elem;
        if !spilled && device_bytes + footprint <= device_budget_bytes {
            device_bytes += footprint;
            tags.push(DeviceClass::Device);
        } else {
            spilled = true;
            host_bytes += footprint;
            host_elems += elems;
            tags.push(DeviceClass::Host);
        }
    }
    Placement {
        tags,
        device_bytes,
        host_bytes,
        transfer_bytes_per_step: host_elems * (PARAM_BYTES + GRAD_BYTES) * 2,
    }
}
