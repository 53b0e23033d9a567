//! The user-report test template: turns a datapoint into a five-step test
//! activity plus a definite oracle, evaluates the oracle over execution
//! traces, and reads/writes emitted test files.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::log_model::{canonical_actions, Datapoint, Datestamp, TestKey};
use crate::scalar::Real;
use crate::sim_platform::ExecutionTrace;

/// One template step. `Post`, `Report` and `Respond` are stimuli; the two
/// `Observe*` steps are observations.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Step {
    Post(String),
    Report(Vec<String>),
    ObserveReviewJob,
    Respond(String),
    ObserveActions,
}

impl Step {
    pub fn is_stimulus(&self) -> bool {
        matches!(self, Step::Post(_) | Step::Report(_) | Step::Respond(_))
    }

    pub fn is_observation(&self) -> bool {
        !self.is_stimulus()
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Step::Post(c) => write!(f, "post {c}"),
            Step::Report(r) => write!(f, "report [{}]", r.join(", ")),
            Step::ObserveReviewJob => f.write_str("observe review job"),
            Step::Respond(d) => write!(f, "respond {d}"),
            Step::ObserveActions => f.write_str("observe actions"),
        }
    }
}

/// post, report, observe job, respond, observe actions. Always five steps in
/// that order; the only way to build one is from its three stimuli.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TestActivity {
    steps: [Step; 5],
}

impl TestActivity {
    pub fn new(content_type: &str, report_tags: &[String], decision: &str) -> Self {
        TestActivity {
            steps: [
                Step::Post(content_type.to_owned()),
                Step::Report(report_tags.to_vec()),
                Step::ObserveReviewJob,
                Step::Respond(decision.to_owned()),
                Step::ObserveActions,
            ],
        }
    }

    pub fn steps(&self) -> &[Step; 5] {
        &self.steps
    }

    pub fn content_type(&self) -> &str {
        match &self.steps[0] {
            Step::Post(c) => c,
            _ => unreachable!("template order"),
        }
    }

    pub fn report_tags(&self) -> &[String] {
        match &self.steps[1] {
            Step::Report(r) => r,
            _ => unreachable!("template order"),
        }
    }

    pub fn decision(&self) -> &str {
        match &self.steps[3] {
            Step::Respond(d) => d,
            _ => unreachable!("template order"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    pub fn passed(self) -> bool {
        self == Verdict::Pass
    }
}

impl From<bool> for Verdict {
    fn from(b: bool) -> Self {
        if b {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }
}

/// Expects a review job to appear and the executed actions to equal
/// `expected` as a multiset.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DefiniteOracle {
    expected: Vec<String>,
}

impl DefiniteOracle {
    pub fn new<S: AsRef<str>>(expected: &[S]) -> Self {
        DefiniteOracle {
            expected: canonical_actions(expected),
        }
    }

    pub fn expected(&self) -> &[String] {
        &self.expected
    }

    pub fn evaluate(&self, trace: &ExecutionTrace) -> Verdict {
        if !trace.review_job_observed() {
            return Verdict::Fail;
        }
        match trace.observed_actions() {
            Some(actions) => Verdict::from(canonical_actions(actions) == self.expected),
            None => Verdict::Fail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InferredTest {
    pub activity: TestActivity,
    pub oracle: DefiniteOracle,
    pub source: Datapoint,
    pub key: TestKey,
}

/// Apply the template to a canonical datapoint.
pub fn instantiate(x: &Datapoint) -> InferredTest {
    InferredTest {
        activity: TestActivity::new(x.c(), x.r(), x.d()),
        oracle: DefiniteOracle::new(x.a()),
        source: x.clone(),
        key: x.key().clone(),
    }
}

pub fn evaluate(oracle: &DefiniteOracle, trace: &ExecutionTrace) -> Verdict {
    oracle.evaluate(trace)
}

pub const TEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestStats<F> {
    pub eta: usize,
    pub rho: F,
    pub first_day: Datestamp,
}

/// On-disk form of a production-ready test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRecord<F> {
    pub schema_version: u32,
    pub content_type: String,
    pub report_tags: Vec<String>,
    pub decision: String,
    pub expected_actions: Vec<String>,
    pub eta: usize,
    pub rho: F,
    pub first_seen_day: u32,
}

impl<F: Real> TestRecord<F> {
    pub fn new(test: &InferredTest, stats: &TestStats<F>) -> Self {
        TestRecord {
            schema_version: TEST_SCHEMA_VERSION,
            content_type: test.key.content_type().to_owned(),
            report_tags: test.key.report_tags().to_vec(),
            decision: test.key.decision().to_owned(),
            expected_actions: test.oracle.expected().to_vec(),
            eta: stats.eta,
            rho: stats.rho,
            first_seen_day: stats.first_day.0,
        }
    }

    pub fn to_test(&self) -> Result<(InferredTest, TestStats<F>)> {
        let key = TestKey::new(
            &self.content_type,
            &self.report_tags,
            &self.decision,
            &self.expected_actions,
        )?;
        let first_day = Datestamp(self.first_seen_day);
        let test = instantiate(&Datapoint::new(first_day, key));
        Ok((
            test,
            TestStats {
                eta: self.eta,
                rho: self.rho,
                first_day,
            },
        ))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("record serializes");
        s.push('\n');
        s
    }
}

pub fn test_file_name(key: &TestKey) -> String {
    format!("{}.json", key.stable_hash())
}

/// Write `test` into `dir` as `<key-hash>.json` and return the path.
pub fn emit_test_file<F: Real>(test: &InferredTest, stats: &TestStats<F>, dir: &Path) -> Result<PathBuf> {
    let path = dir.join(test_file_name(&test.key));
    std::fs::write(&path, TestRecord::new(test, stats).to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn load_test_file<F: Real>(path: &Path) -> Result<(InferredTest, TestStats<F>)> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let record: TestRecord<F> = serde_json::from_str(&s).map_err(|e| Error::json(path, e))?;
    record.to_test()
}
