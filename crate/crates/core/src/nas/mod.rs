//! Searchable-cell primitives: candidate operations, continuous
//! relaxation with partial-channel sampling, single-path highest-weight
//! forward, and genotype derivation.

mod cell;
mod genotype;
mod ops;

pub use cell::{
    derive_genotype, mixed_edge_forward, single_path_choice, single_path_forward, ArchSnapshot,
    softmax_arr, CellArch, CellTopology, DerivedCell, EvalMode, SearchCell,
};
pub use genotype::{CellKind, GenoEdge, GenoNode, Genotype, GenotypeFile, OutputRule};
pub use ops::{apply_op, init_op_params, CandidateOpSet, OpDescriptor, OpKind, OpParams};
