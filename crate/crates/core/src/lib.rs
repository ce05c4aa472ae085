//! Federated-learning simulation engine built around opportunistic block
//! dropout: models decompose into semantic blocks, clients and server
//! transmit only the blocks that changed most (quantized as deltas), and
//! every exchanged byte is accounted for.

pub mod aggregate;
pub mod error;
pub mod model;
pub mod obd;
pub mod orchestrator;
pub mod quant;
pub mod rng;
pub mod trainer;
pub mod transport;

pub use aggregate::{apply_deltas, fedavg, reconstruct_client, ClientUpdate, WeightedModel};
pub use error::{Error, Result};
pub use model::{
    apply_blocks, decompose, vectorize, Block, BlockId, BlockedModel, DecompositionRules, Layer,
    LayerKind, ParameterTensor,
};
pub use obd::{
    mbd, score_all, select_blocks, BlockImportance, ContributionLogEntry, DropoutConfig, TieBreak,
};
pub use orchestrator::{
    run_federated, wall_clock_estimate, Algorithm, DatasetSpec, ModelSpec, Phase, RoundRecord,
    RunConfig, RunOutput, RunReport,
};
pub use quant::{
    decode_delta, dequantize, encode_delta, quantize, QuantizedBlockDelta, QuantizedTensor,
};
pub use trainer::{
    evaluate, init_model, local_train, mlp_rules, Activation, BlobTask, Dataset, Gradient,
    Metrics, Mlp, MlpSpec,
};
pub use transport::{
    deserialize, serialize, Channel, DeliveryRecord, MessageKind, MessagePayload, RoundMessage,
};
