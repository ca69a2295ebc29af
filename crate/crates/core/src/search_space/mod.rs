//! Candidate operations, cells and genotypes.

mod alpha;
mod cell;
mod genotype;
mod ops;

pub use alpha::AlphaTable;
pub use cell::{edge_count, mixed_forward, preprocess_params, Cell, CellBody, CellDims, CellKind, CellTemplate, Preprocess};
pub use genotype::{CellGenotype, Genotype, NodeInput};
pub use ops::{op_macs, op_param_count, EdgeOp, OpKind};
