//! Analytic cost and memory models: the published per-mode communication
//! volume formulas kept in exact rational arithmetic, the volumes our
//! own collective decompositions imply, per-rank memory element counts,
//! pipeline-boundary traffic, and the reconciliation report tying the
//! instrumented ledger back to both.

use num_rational::Ratio;
use thiserror::Error;

use crate::comm::{LedgerChannel, Scheduler};
use crate::mesh::{build_mesh, MeshError, ParallelMode};
use crate::tensor::{DenseTensor, Rng};
use crate::tp_linear::{run_matmul3d, run_mlp1d, run_summa2d, run_summa2p5d, TpError};

pub type Exact = Ratio<u128>;

#[derive(Debug, Error)]
pub enum AnalyticError {
    #[error("mode {0} has no published volume formula")]
    UnsupportedMode(String),
    #[error("dimension not divisible: {0}")]
    IndivisibleDim(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Tp(#[from] TpError),
}

/// Workload shape for a square two-layer block: activations are
/// [b*s, h], each square weight is [h, h]; `expansion` only matters for
/// the 1D MLP hidden width r*h.
#[derive(Clone, Copy, Debug)]
pub struct WorkloadShape {
    pub batch: u128,
    pub seq: u128,
    pub hidden: u128,
    pub expansion: u128,
    pub layers: u128,
}

impl WorkloadShape {
    /// The figure-caption shape used throughout the scaling analysis.
    pub fn paper_scaling() -> Self {
        WorkloadShape { batch: 32, seq: 512, hidden: 1024, expansion: 4, layers: 2 }
    }

    pub fn s_x(&self) -> u128 {
        self.batch * self.seq * self.hidden
    }

    pub fn s_w(&self) -> u128 {
        self.hidden * self.hidden
    }

    pub fn s_y(&self) -> u128 {
        // Square weights: the output has the input's shape.
        self.s_x()
    }
}

fn mesh_dims(mode: ParallelMode, world: usize) -> Result<Vec<u128>, AnalyticError> {
    Ok(build_mesh(mode, world)?.dims.iter().map(|&d| d as u128).collect())
}

/// The published fwd+bwd volume formula for each mode, evaluated
/// exactly. The 2.5D row divides S_x by the depth and the 3D row
/// carries a 2(l-1)/l factor, so the result is rational in general.
pub fn paper_comm_volume(
    mode: ParallelMode,
    world: usize,
    shape: &WorkloadShape,
) -> Result<Exact, AnalyticError> {
    let dims = mesh_dims(mode, world)?;
    let (sx, sw, sy) = (shape.s_x(), shape.s_w(), shape.s_y());
    let v = match mode {
        ParallelMode::OneD => Exact::from_integer(2 * (dims[0] - 1) * sx),
        ParallelMode::TwoD => {
            let j = dims[0];
            Exact::from_integer(3 * (j - 1) * (sx + sw))
        }
        ParallelMode::TwoPointFiveD { .. } => {
            let (d, k) = (dims[0], dims[1]);
            Exact::from_integer(3 * (k - 1)) * (Exact::new(sx, d) + Exact::from_integer(sw))
        }
        ParallelMode::ThreeD => {
            let l = dims[0];
            Exact::new(2 * (l - 1), l) * Exact::from_integer(sx + sw + sy)
        }
        other => return Err(AnalyticError::UnsupportedMode(other.name().into())),
    };
    Ok(v)
}

/// The volume our collective decompositions actually produce, by shape
/// alone (the runs are data-independent). `backward` adds the gradient
/// pass.
pub fn derived_comm_volume(
    mode: ParallelMode,
    world: usize,
    shape: &WorkloadShape,
    backward: bool,
) -> Result<u128, AnalyticError> {
    let dims = mesh_dims(mode, world)?;
    let (sx, sw, sy) = (shape.s_x(), shape.s_w(), shape.s_y());
    let v = match mode {
        // One all_reduce of the output per pass: 2(p-1)*S_x each.
        ParallelMode::OneD => {
            let p = dims[0];
            if backward { 4 * (p - 1) * sx } else { 2 * (p - 1) * sx }
        }
        ParallelMode::TwoD => {
            let j = dims[0];
            let fwd = (j - 1) * (sx + sw);
            if backward { 3 * fwd } else { fwd }
        }
        ParallelMode::TwoPointFiveD { .. } => {
            let (d, k) = (dims[0], dims[1]);
            let per_pass = (k - 1) * (sx + d * sw);
            if backward { 3 * per_pass + 2 * (d - 1) * sw } else { per_pass }
        }
        ParallelMode::ThreeD => {
            let l = dims[0];
            if backward {
                (l - 1) * (3 * sx + 3 * sw + 2 * sy)
            } else {
                (l - 1) * (sx + sw + sy)
            }
        }
        other => return Err(AnalyticError::UnsupportedMode(other.name().into())),
    };
    Ok(v)
}

fn exact_div(num: u128, den: u128, what: &str) -> Result<u128, AnalyticError> {
    if den == 0 || num % den != 0 {
        return Err(AnalyticError::IndivisibleDim(format!("{what}: {num} over {den}")));
    }
    Ok(num / den)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemoryKind {
    Weights,
    Activations,
    ModelDataTotal,
}

/// Per-rank element count for a stack of `layers` square [h, h] layers
/// on activations of [b*s, h]. 1D replicates the boundary activations
/// on every rank and splits only the intermediates; 2D/2.5D/3D shard
/// every activation. 2.5D replicates weights across its depth axis.
pub fn memory_per_rank(
    mode: ParallelMode,
    world: usize,
    shape: &WorkloadShape,
    kind: MemoryKind,
) -> Result<u128, AnalyticError> {
    let dims = mesh_dims(mode, world)?;
    let p = world as u128;
    let l_count = shape.layers;
    let sx = shape.s_x();
    let sw_total = l_count * shape.s_w();

    let weights = match mode {
        ParallelMode::TwoPointFiveD { .. } => {
            exact_div(dims[0] * sw_total, p, "replicated weights over ranks")?
        }
        ParallelMode::OneD | ParallelMode::TwoD | ParallelMode::ThreeD => {
            exact_div(sw_total, p, "weights over ranks")?
        }
        other => return Err(AnalyticError::UnsupportedMode(other.name().into())),
    };
    let activations = match mode {
        // Input and output replicated; layers-1 intermediates split.
        ParallelMode::OneD => 2 * sx + exact_div((l_count - 1) * sx, p, "intermediates")?,
        _ => exact_div((l_count + 1) * sx, p, "activations over ranks")?,
    };
    Ok(match kind {
        MemoryKind::Weights => weights,
        MemoryKind::Activations => activations,
        MemoryKind::ModelDataTotal => weights + activations,
    })
}

/// Activation traffic at one pipeline-stage boundary, elements per
/// microbatch with boundary size `s_b`. The baseline 1D scheme splits
/// the tensor before the cross-stage hop and re-gathers it on arrival
/// ((p-1)*S_b of intra-node all_gather); the sharded modes pass shards
/// directly with no gather.
pub fn pipeline_boundary_volume(
    mode: ParallelMode,
    p_tensor: u128,
    s_b: u128,
) -> Result<(u128, u128), AnalyticError> {
    let cross = exact_div(s_b, p_tensor, "boundary over tensor ranks")?;
    let overhead = match mode {
        ParallelMode::OneD => (p_tensor - 1) * s_b,
        _ => 0,
    };
    Ok((cross, overhead))
}

// ---------------------------------------------------------------------------
// Scaling table
// ---------------------------------------------------------------------------

pub struct ScalingRow {
    pub p: usize,
    pub mode: ParallelMode,
    pub paper_model: Exact,
}

fn fmt_exact(v: &Exact) -> String {
    if v.is_integer() {
        format!("{}", v.numer())
    } else {
        format!("{}/{}", v.numer(), v.denom())
    }
}

fn mode_label(mode: ParallelMode) -> String {
    match mode {
        ParallelMode::TwoPointFiveD { depth } => format!("2.5d(d={depth})"),
        other => other.name().to_string(),
    }
}

/// Paper-model volumes at the scaling-analysis shape across a processor
/// sweep. For each p the admissible modes are included: 1D always, 2D
/// for square p, 2.5D for each depth in `depths` with p/d square, 3D
/// for cube p.
pub fn scaling_table(shape: &WorkloadShape, ps: &[usize], depths: &[usize]) -> Vec<ScalingRow> {
    let mut rows = Vec::new();
    for &p in ps {
        let mut modes = vec![ParallelMode::OneD, ParallelMode::TwoD, ParallelMode::ThreeD];
        for &d in depths {
            modes.push(ParallelMode::TwoPointFiveD { depth: d });
        }
        for mode in modes {
            if let Ok(v) = paper_comm_volume(mode, p, shape) {
                rows.push(ScalingRow { p, mode, paper_model: v });
            }
        }
    }
    rows
}

pub fn scaling_table_csv(rows: &[ScalingRow]) -> String {
    let mut out = String::from("p,mode,paper_model_elements\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.p, mode_label(r.mode), fmt_exact(&r.paper_model)));
    }
    out
}

// ---------------------------------------------------------------------------
// Reconciliation
// ---------------------------------------------------------------------------

pub struct ReconciliationReport {
    pub mode: ParallelMode,
    pub world: usize,
    pub measured: u128,
    pub derived: u128,
    pub paper_model: Exact,
    /// measured / paper_model.
    pub ratio: f64,
}

impl ReconciliationReport {
    pub fn csv_header() -> &'static str {
        "mode,p,measured,derived,paper_model,ratio"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.4}",
            mode_label(self.mode),
            self.world,
            self.measured,
            self.derived,
            fmt_exact(&self.paper_model),
            self.ratio
        )
    }
}

fn ratio_f64(v: &Exact) -> f64 {
    *v.numer() as f64 / *v.denom() as f64
}

/// Runs an instrumented fwd+bwd at `shape` (interpreting batch*seq as
/// the row count) and reports the measured aggregate send volume
/// against the derived and paper models. The caller decides what to do
/// when measured and paper disagree; measured == derived is asserted.
pub fn reconcile(
    mode: ParallelMode,
    world: usize,
    sched: Scheduler,
    shape: &WorkloadShape,
    seed: u64,
) -> Result<ReconciliationReport, AnalyticError> {
    let m = (shape.batch * shape.seq) as usize;
    let h = shape.hidden as usize;
    let mut rng = Rng::new(seed);
    let x = DenseTensor::random_uniform(&mut rng, vec![m, h], -1.0, 1.0);
    let dy = DenseTensor::random_uniform(&mut rng, vec![m, h], -1.0, 1.0);

    let ledger = match mode {
        ParallelMode::OneD => {
            let r = (shape.expansion * shape.hidden) as usize;
            let w1 = DenseTensor::random_uniform(&mut rng, vec![h, r], -1.0, 1.0);
            let w2 = DenseTensor::random_uniform(&mut rng, vec![r, h], -1.0, 1.0);
            run_mlp1d(world, sched, &x, &w1, &w2, Some(&dy))?.ledger
        }
        ParallelMode::TwoD | ParallelMode::TwoPointFiveD { .. } | ParallelMode::ThreeD => {
            let w = DenseTensor::random_uniform(&mut rng, vec![h, h], -1.0, 1.0);
            match mode {
                ParallelMode::TwoD => run_summa2d(world, sched, &x, &w, Some(&dy))?.ledger,
                ParallelMode::TwoPointFiveD { depth } => {
                    run_summa2p5d(depth, world, sched, &x, &w, Some(&dy))?.ledger
                }
                _ => run_matmul3d(world, sched, &x, &w, Some(&dy))?.ledger,
            }
        }
        other => return Err(AnalyticError::UnsupportedMode(other.name().into())),
    };

    let measured = ledger.total_sent(LedgerChannel::Experiment, None) as u128;
    let derived = derived_comm_volume(mode, world, shape, true)?;
    assert_eq!(
        measured, derived,
        "instrumented volume diverged from the derived model for {} at p={world}",
        mode.name()
    );
    let paper_model = paper_comm_volume(mode, world, shape)?;
    let ratio = if paper_model == Exact::from_integer(0) {
        if measured == 0 { 1.0 } else { f64::INFINITY }
    } else {
        measured as f64 / ratio_f64(&paper_model)
    };
    Ok(ReconciliationReport { mode, world, measured, derived, paper_model, ratio })
}
