//! Inference of end-to-end tests with definite oracles from production logs.
//!
//! Each production datapoint `(t, c, r, d, a)` becomes a five-step test:
//! post content of type `c`, report it with tags `r`, wait for the review
//! job, respond with decision `d`, and check that exactly the actions `a`
//! were executed. Tests are sampled by score, filtered for flakiness in
//! staging and promoted to a deployed suite.
//!
//! Scores, rates and coverage are generic over the scalar type; the
//! `*64` and `*32` aliases below fix it to `f64` or `f32`.

pub mod campaign;
pub mod clustering;
pub mod error;
pub mod log_model;
pub mod metrics;
pub mod pipeline;
pub mod sampling;
pub mod scalar;
pub mod seeds;
pub mod sim_platform;
pub mod template;

pub use campaign::{run_campaign, validate_config, Campaign, CampaignConfig, CampaignReport, CampaignRun};
pub use clustering::{CategoricalPoint, ClusterModel, KPolicy};
pub use error::{Error, Result};
pub use log_model::{Datapoint, Datestamp, ProductionLogStore, RawDatapoint, TestKey, ViolationMap, WWLogEntry, WWLogStore};
pub use metrics::{CoverageRow, CoverageUniverse, Funnel};
pub use pipeline::{Phase, PhaseLedger, Pipeline, PipelineConfig};
pub use sampling::{ScoreWeights, ScoredCandidate};
pub use scalar::Real;
pub use template::{DefiniteOracle, InferredTest, TestActivity, Verdict};

pub type ScoreWeights64 = ScoreWeights<f64>;
pub type ScoreWeights32 = ScoreWeights<f32>;
pub type ScoredCandidate64 = ScoredCandidate<f64>;
pub type ScoredCandidate32 = ScoredCandidate<f32>;
pub type PipelineConfig64 = PipelineConfig<f64>;
pub type PipelineConfig32 = PipelineConfig<f32>;
pub type Pipeline64 = Pipeline<f64>;
pub type Pipeline32 = Pipeline<f32>;
pub type CampaignConfig64 = CampaignConfig<f64>;
pub type CampaignConfig32 = CampaignConfig<f32>;
pub type Campaign64 = Campaign<f64>;
pub type Campaign32 = Campaign<f32>;
pub type CoverageRow64 = CoverageRow<f64>;
pub type CoverageRow32 = CoverageRow<f32>;
pub type Funnel64 = Funnel<f64>;
pub type Funnel32 = Funnel<f32>;
