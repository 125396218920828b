pub mod binning;
pub mod checkpoint;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod synthdata;
pub mod training;

pub use binning::{BinSpec, ClassWeights, NormStats};
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use error::{Error, Result};
pub use metrics::{MetricReport, PredictionBatch};
pub use model::{AttentionMode, ModelConfig, Params};
pub use numerics::{Tape, Tensor, Var};
pub use synthdata::{Dataset, GeneratorConfig, SampleRecord, SyntheticWorld};
pub use training::{RunLog, TrainConfig};
