//! Record files, the synthetic enumerable space with its oracle, and splits.

mod io;
mod space;
mod split;
mod synthetic;

pub use io::{first_unlabeled, load_records, write_records};
pub use space::{CellStructure, Oracle, RecordSpace, TrueRank};
pub use split::{split_indices, Split, SplitConfig};
pub use synthetic::{
    count_structures, generate_synthetic, OracleWeights, SyntheticSpace, SyntheticSpec,
    ORACLE_NOISE, STRUCTURE_BUDGET,
};
