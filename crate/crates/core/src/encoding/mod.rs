//! Architecture records and their channel-stacked tensor encoding.

mod features;
mod record;

pub use features::{
    encode, encode_dag7, encode_fixed4, patchify, positional_table, ChannelStats, EncodingLayout,
    FeatureTensor,
};
pub use record::{
    fixed4_edge_index, ops, structure_key, Accuracy, ArchitectureRecord, CellStats, Family,
};
