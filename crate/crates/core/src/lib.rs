//! Centromere inference from trans-contact maps: a genome model, a contact
//! simulator, map I/O with iterative correction, and three inference
//! backends (SMC-ABC on Pearson distances, SMC-ABC on learned summaries,
//! and sequential neural posterior estimation).

pub mod contact;
pub mod error;
pub mod flow;
pub mod genome;
pub mod hic_io;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod simulator;
pub mod smc_abc;
pub mod snpe;
pub mod summary;
pub mod task;

pub use contact::{Block, BlockRow, ContactMap};
pub use error::{CoreError, Result};
pub use genome::{BoxPrior, CentromereVector, Chromosome, GenomeSpec};
pub use hic_io::{
    ice_normalize, load_map, make_reference, normalize_map, save_map, IceOptions, IceResult, MapMeta, ReferenceMode,
};
pub use simulator::{simulate_block_row, simulate_block_row_with, simulate_map, simulate_map_with, SimParams};
