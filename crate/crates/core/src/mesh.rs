//! Rank topologies and communication groups for every parallel mode.
//!
//! Rank-to-coordinate mapping is row-major (rank = i*j + c for a 2D
//! mesh); for 2.5D the dims are ordered [depth, row, col] with depth
//! outermost. Rank-count violations are hard errors: falling back to 1D
//! is an explicit caller choice, never a silent one.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MeshError {
    #[error("rank-count constraint violated: {0}")]
    ConstraintViolation(String),
    #[error("unknown axis {axis:?} for {mode}")]
    UnknownAxis { axis: String, mode: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParallelMode {
    OneD,
    TwoD,
    /// `depth = 1` is permitted and degenerates toward 2D.
    TwoPointFiveD { depth: usize },
    ThreeD,
    Sequence,
    DataParallel,
}

impl ParallelMode {
    pub fn name(&self) -> &'static str {
        match self {
            ParallelMode::OneD => "1d",
            ParallelMode::TwoD => "2d",
            ParallelMode::TwoPointFiveD { .. } => "2.5d",
            ParallelMode::ThreeD => "3d",
            ParallelMode::Sequence => "seq",
            ParallelMode::DataParallel => "dp",
        }
    }

    pub fn axis_names(&self) -> &'static [&'static str] {
        match self {
            ParallelMode::OneD | ParallelMode::Sequence | ParallelMode::DataParallel => &["ring"],
            ParallelMode::TwoD => &["row", "column"],
            ParallelMode::TwoPointFiveD { .. } => &["depth", "row", "column"],
            ParallelMode::ThreeD => &["depth", "row", "column"],
        }
    }
}

/// An ordered communication group: members ascend along one mesh axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommGroup {
    pub id: String,
    pub ranks: Vec<usize>,
    pub axis: String,
}

impl CommGroup {
    pub fn size(&self) -> usize {
        self.ranks.len()
    }

    /// Position of `rank` within the group's fixed member order.
    pub fn position_of(&self, rank: usize) -> Option<usize> {
        self.ranks.iter().position(|&r| r == rank)
    }

    /// A standalone group over `ranks` in the given order, for callers
    /// that do not derive groups from a mesh (e.g. ZeRO's data-parallel
    /// group).
    pub fn of_ranks(id: &str, ranks: Vec<usize>, axis: &str) -> Self {
        Self { id: id.to_string(), ranks, axis: axis.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceMesh {
    pub mode: ParallelMode,
    pub world_size: usize,
    /// [p] for 1D, [j,j] for 2D, [d,k,k] for 2.5D, [l,l,l] for 3D.
    pub dims: Vec<usize>,
}

impl DeviceMesh {
    pub fn coords_of(&self, rank: usize) -> Vec<usize> {
        assert!(rank < self.world_size, "rank {rank} out of range");
        let mut coords = vec![0; self.dims.len()];
        let mut rem = rank;
        for (i, &d) in self.dims.iter().enumerate().rev() {
            coords[i] = rem % d;
            rem /= d;
        }
        coords
    }

    pub fn rank_of(&self, coords: &[usize]) -> usize {
        assert_eq!(coords.len(), self.dims.len());
        let mut rank = 0;
        for (&c, &d) in coords.iter().zip(&self.dims) {
            assert!(c < d, "coordinate {c} out of range for dim {d}");
            rank = rank * d + c;
        }
        rank
    }
}

fn int_root(p: usize, k: u32) -> Option<usize> {
    let mut r = (p as f64).powf(1.0 / k as f64).round() as usize;
    // Guard against float rounding at the boundary.
    while r.pow(k) > p {
        r -= 1;
    }
    while (r + 1).pow(k) <= p {
        r += 1;
    }
    (r.pow(k) == p).then_some(r)
}

pub fn build_mesh(mode: ParallelMode, world_size: usize) -> Result<DeviceMesh, MeshError> {
    if world_size == 0 {
        return Err(MeshError::ConstraintViolation("world_size must be >= 1".into()));
    }
    let dims = match mode {
        ParallelMode::OneD | ParallelMode::Sequence | ParallelMode::DataParallel => {
            vec![world_size]
        }
        ParallelMode::TwoD => {
            let j = int_root(world_size, 2).ok_or_else(|| {
                MeshError::ConstraintViolation(format!(
                    "2D requires world_size = j^2, got {world_size}"
                ))
            })?;
            vec![j, j]
        }
        ParallelMode::TwoPointFiveD { depth } => {
            if depth == 0 {
                return Err(MeshError::ConstraintViolation("depth must be >= 1".into()));
            }
            if world_size % depth != 0 {
                return Err(MeshError::ConstraintViolation(format!(
                    "2.5D requires world_size = depth*k^2; {depth} does not divide {world_size}"
                )));
            }
            let k = int_root(world_size / depth, 2).ok_or_else(|| {
                MeshError::ConstraintViolation(format!(
                    "2.5D requires world_size = depth*k^2, got {world_size} with depth {depth}"
                ))
            })?;
            vec![depth, k, k]
        }
        ParallelMode::ThreeD => {
            let l = int_root(world_size, 3).ok_or_else(|| {
                MeshError::ConstraintViolation(format!(
                    "3D requires world_size = l^3, got {world_size}"
                ))
            })?;
            vec![l, l, l]
        }
    };
    Ok(DeviceMesh { mode, world_size, dims })
}

/// Partitions all ranks into disjoint groups of size `dims[spanned]`,
/// where the spanned dimension is selected by the axis label.
pub fn groups_along(mesh: &DeviceMesh, axis: &str) -> Result<Vec<CommGroup>, MeshError> {
    let spanned = spanned_dim(mesh, axis)?;
    Ok(groups_spanning(mesh, spanned, axis))
}

fn spanned_dim(mesh: &DeviceMesh, axis: &str) -> Result<usize, MeshError> {
    let err = || MeshError::UnknownAxis {
        axis: axis.to_string(),
        mode: mesh.mode.name().to_string(),
    };
    match mesh.mode {
        ParallelMode::OneD | ParallelMode::Sequence | ParallelMode::DataParallel => match axis {
            "ring" => Ok(0),
            _ => Err(err()),
        },
        // A "row" group holds the row coordinate fixed and spans columns.
        ParallelMode::TwoD => match axis {
            "row" => Ok(1),
            "column" => Ok(0),
            _ => Err(err()),
        },
        ParallelMode::TwoPointFiveD { .. } => match axis {
            "depth" => Ok(0),
            "row" => Ok(2),
            "column" => Ok(1),
            _ => Err(err()),
        },
        ParallelMode::ThreeD => match axis {
            "depth" => Ok(0),
            "row" => Ok(1),
            "column" => Ok(2),
            _ => Err(err()),
        },
    }
}

/// Groups in which the `spanned` coordinate varies and every other
/// coordinate is fixed; members ascend along the spanned coordinate.
pub fn groups_spanning(mesh: &DeviceMesh, spanned: usize, axis: &str) -> Vec<CommGroup> {
    let mut groups = Vec::new();
    let n_groups = mesh.world_size / mesh.dims[spanned];
    let mut seen = vec![false; mesh.world_size];
    for rank in 0..mesh.world_size {
        if seen[rank] {
            continue;
        }
        let coords = mesh.coords_of(rank);
        let mut members = Vec::with_capacity(mesh.dims[spanned]);
        for v in 0..mesh.dims[spanned] {
            let mut c = coords.clone();
            c[spanned] = v;
            let r = mesh.rank_of(&c);
            seen[r] = true;
            members.push(r);
        }
        let fixed: Vec<String> = coords
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != spanned)
            .map(|(_, v)| v.to_string())
            .collect();
        groups.push(CommGroup {
            id: format!("{}.{axis}[{}]", mesh.mode.name(), fixed.join(",")),
            ranks: members,
            axis: axis.to_string(),
        });
    }
    debug_assert_eq!(groups.len(), n_groups);
    groups
}
