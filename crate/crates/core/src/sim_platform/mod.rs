//! Simulated content platform used as the system under test: content
//! posting, reporting, a review-job queue, a reviewer endpoint and an
//! enforcement engine, with noise, scheduled faults and a synthetic
//! production-log generator.

mod generator;
mod platform;
mod rules;

pub use generator::{generate_production_logs, GeneratorConfig, Universe, UniverseSpec};
pub use platform::{
    execute_activity, ContentId, ExecutionTrace, JobId, Platform, PlatformConfig, PlatformFactory, ReportId,
    TraceEvent,
};
pub use rules::{
    deviate, BimodalNoise, DeviationMode, FaultEffect, FaultInjection, FaultPlan, NoiseModel, RuleKey, RuleTable,
    SPURIOUS_ACTION,
};
