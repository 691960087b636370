//! Federated learning simulation with lattice-quantized uploads.

pub mod dataset;
pub mod model;
pub mod protocol;
pub mod sim;

pub use dataset::{client_classes, load_idx, partition_dataset, synthetic, write_idx, DataSource, Dataset, SyntheticSpec};
pub use model::{evaluate, local_train, Model, ModelKind, ShardObjective};
pub use protocol::{
    bits_accounting, decode_payload, encode_update, raw_bits, round_dither_seed, server_round, Encoded, Payload,
    PayloadBody,
};
pub use sim::{
    client_seed, load_data, run_fl, run_fl_on, ClientRecord, DataConfig, FlConfig, QuantizerKind, RoundRecord,
    RunOutput, GAMMA,
};
