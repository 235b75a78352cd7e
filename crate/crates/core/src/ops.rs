//! Operator vocabulary shared by the planners and the simulator.

use serde::{Deserialize, Serialize};

/// Every operator kind that can appear in an operation graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OpKind {
    /// Pull a batch of categorical IDs from remote storage.
    DataLoad,
    Unique,
    Partition,
    Gather,
    Shuffle,
    Stitch,
    SegmentReduce,
    /// Fused `Unique` + `Partition`.
    UniquePartition,
    /// Fused `Shuffle` that writes a stitched output directly.
    ShuffleStitch,
    Interaction,
    Mlp,
    MlpBackward,
    InteractionBackward,
    /// Gradient exchange back to the owning embedding shards.
    ShuffleBackward,
    /// Scatter gradient rows into the local embedding shard.
    GatherBackward,
    Allreduce,
    AllToAllv,
    PsPull,
    PsPush,
}

/// Hardware-resource class of a kernel; fusion never mixes computation with
/// the other classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum KernelClass {
    Computation,
    Memory,
    Communication,
}

/// One of the serial servers each executor owns in the simulator.
/// Device memory is a capacity constraint, not a rate, so it is checked at
/// graph-build time instead of appearing here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Resource {
    Compute,
    IntraBw,
    InterBw,
}

impl OpKind {
    pub const ALL: [OpKind; 19] = [
        OpKind::DataLoad,
        OpKind::Unique,
        OpKind::Partition,
        OpKind::Gather,
        OpKind::Shuffle,
        OpKind::Stitch,
        OpKind::SegmentReduce,
        OpKind::UniquePartition,
        OpKind::ShuffleStitch,
        OpKind::Interaction,
        OpKind::Mlp,
        OpKind::MlpBackward,
        OpKind::InteractionBackward,
        OpKind::ShuffleBackward,
        OpKind::GatherBackward,
        OpKind::Allreduce,
        OpKind::AllToAllv,
        OpKind::PsPull,
        OpKind::PsPush,
    ];

    pub fn kernel_class(self) -> KernelClass {
        match self {
            OpKind::Unique
            | OpKind::Partition
            | OpKind::Gather
            | OpKind::Stitch
            | OpKind::SegmentReduce
            | OpKind::UniquePartition
            | OpKind::GatherBackward => KernelClass::Memory,
            OpKind::DataLoad
            | OpKind::Shuffle
            | OpKind::ShuffleStitch
            | OpKind::ShuffleBackward
            | OpKind::Allreduce
            | OpKind::AllToAllv
            | OpKind::PsPull
            | OpKind::PsPush => KernelClass::Communication,
            OpKind::Interaction
            | OpKind::Mlp
            | OpKind::MlpBackward
            | OpKind::InteractionBackward => KernelClass::Computation,
        }
    }
}

impl KernelClass {
    pub fn resource(self) -> Resource {
        match self {
            KernelClass::Computation => Resource::Compute,
            KernelClass::Memory => Resource::IntraBw,
            KernelClass::Communication => Resource::InterBw,
        }
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::fmt::Display for Resource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Resource::Compute => "compute",
            Resource::IntraBw => "intra_bw",
            Resource::InterBw => "inter_bw",
        };
        write!(f, "{s}")
    }
}

impl std::fmt::Display for KernelClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            KernelClass::Computation => "computation",
            KernelClass::Memory => "memory",
            KernelClass::Communication => "communication",
        };
        write!(f, "{s}")
    }
}
