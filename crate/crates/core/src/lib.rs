//! Partite chains, octahedral quasirandomness, homomorphism counting, partition-system
//! regularization and the grid reductions built on them.

pub mod applications;
pub mod chain;
pub mod counting;
pub mod error;
pub mod io;
pub mod quasirandom;
pub mod regularity;

pub use chain::{down_closure, index_of, Chain, Edge, EdgeTable, IndexSet, TupleSpace, VertexPartition};
pub use error::{Error, Result};
