//! Exploration, staging and deployment phases.
//!
//! Exploration samples fresh production datapoints by score and runs each
//! once. Keys with enough passing runs become tests of interest and are
//! re-run in staging; keys that clear the stricter deployment thresholds are
//! emitted as standalone test files and removed from exploration.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use crate::clustering::{CategoricalPoint, ClusterModel, KPolicy, DEFAULT_RESTARTS};
use crate::error::{Error, Result};
use crate::log_model::{Datapoint, Datestamp, ProductionLogStore, TestKey, ViolationMap, WWLogEntry, WWLogStore};
use crate::sampling::{pair_of, sample_top_n, ScoreWeights, ScoredCandidate, ScoringContext};
use crate::scalar::Real;
use crate::seeds;
use crate::sim_platform::{execute_activity, FaultPlan, NoiseModel, PlatformConfig, PlatformFactory, RuleTable};
use crate::template::{emit_test_file, instantiate, InferredTest, TestStats};

/// Log scope over which staging thresholds are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StagingScope {
    /// Only runs logged on the current day.
    Day,
    /// Every run logged up to and including the current day.
    #[default]
    Cumulative,
}

/// Store scanned for the previous-day anomaly score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalySource {
    #[default]
    Production,
    WwLogs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, bound = "F: Real")]
pub struct PipelineConfig<F> {
    pub weights: ScoreWeights<F>,
    /// Exploration executions per day (N).
    pub sample_size: usize,
    /// Tests run concurrently per scoring round; scores are recomputed
    /// against the day's WW slice between rounds. `None` means one round.
    pub batch_size: Option<usize>,
    /// Keep one candidate per key each day instead of every datapoint.
    pub distinct_candidates: bool,
    pub k_policy: KPolicy,
    pub kmodes_restarts: usize,
    /// Days of production logs the cluster model is fit on, ending at the
    /// current day.
    pub cluster_window_days: u32,
    pub n_s: usize,
    pub p_s: F,
    pub n_d: usize,
    pub p_d: F,
    pub reruns_per_key: usize,
    pub staging_scope: StagingScope,
    pub anomaly_source: AnomalySource,
    pub seed: u64,
    pub horizon_days: u32,
}

impl<F: Real> Default for PipelineConfig<F> {
    fn default() -> Self {
        PipelineConfig {
            weights: ScoreWeights::equal(),
            sample_size: 100,
            batch_size: None,
            distinct_candidates: false,
            k_policy: KPolicy::default(),
            kmodes_restarts: DEFAULT_RESTARTS,
            cluster_window_days: 1,
            n_s: 10,
            p_s: F::lit(0.90),
            n_d: 50,
            p_d: F::lit(0.95),
            reruns_per_key: 5,
            staging_scope: StagingScope::default(),
            anomaly_source: AnomalySource::default(),
            seed: 0,
            horizon_days: 30,
        }
    }
}

impl<F: Real> PipelineConfig<F> {
    /// Returns (errors, warnings).
    pub fn check(&self) -> (Vec<String>, Vec<String>) {
        let mut errs = Vec::new();
        let mut warns = Vec::new();
        if self.weights.validate().is_err() {
            errs.push(format!(
                "pipeline.weights: alpha + beta + gamma must equal 1 with each >= 0 (got {}, {}, {})",
                self.weights.alpha, self.weights.beta, self.weights.gamma
            ));
        }
        for (name, p) in [("p_s", self.p_s), ("p_d", self.p_d)] {
            if !(p >= F::zero() && p <= F::one()) {
                errs.push(format!("pipeline.{name} must be in [0, 1] (got {p})"));
            }
        }
        for (name, n) in [("n_s", self.n_s), ("n_d", self.n_d)] {
            if n < 1 {
                errs.push(format!("pipeline.{name} must be >= 1"));
            }
        }
        if self.cluster_window_days < 1 {
            errs.push("pipeline.cluster_window_days must be >= 1".into());
        }
        if self.batch_size == Some(0) {
            errs.push("pipeline.batch_size must be >= 1".into());
        }
        match self.k_policy {
            KPolicy::Fixed { k } if k < 1 => errs.push("pipeline.k_policy.k must be >= 1".into()),
            KPolicy::Elbow { min_k, max_k, .. } if min_k < 1 || max_k < min_k => {
                errs.push("pipeline.k_policy needs 1 <= min_k <= max_k".into())
            }
            _ => {}
        }
        if self.n_d < self.n_s {
            warns.push(format!(
                "pipeline.n_d ({}) < pipeline.n_s ({}): deployment is easier to reach than staging",
                self.n_d, self.n_s
            ));
        }
        if self.p_d < self.p_s {
            warns.push(format!("pipeline.p_d ({}) < pipeline.p_s ({})", self.p_d, self.p_s));
        }
        (errs, warns)
    }
}

/// Run count of `key` within `scope`.
pub fn compute_eta<'a>(key: &TestKey, scope: impl IntoIterator<Item = &'a WWLogEntry>) -> usize {
    scope.into_iter().filter(|e| &e.key == key).count()
}

/// Pass rate of `key` within `scope`; undefined when it never ran.
pub fn compute_rho<'a, F: Real>(key: &TestKey, scope: impl IntoIterator<Item = &'a WWLogEntry>) -> Result<F> {
    let (runs, passes) = scope
        .into_iter()
        .filter(|e| &e.key == key)
        .fold((0, 0), |(r, p), e| (r + 1, p + usize::from(e.passed)));
    if runs == 0 {
        return Err(Error::UndefinedRate);
    }
    Ok(F::from_ratio(passes, runs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Exploration,
    Staging,
    Deployed,
    Retired,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Exploration => "exploration",
            Phase::Staging => "staging",
            Phase::Deployed => "deployment",
            Phase::Retired => "retired",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunCounts {
    pub runs: usize,
    pub passes: usize,
}

impl RunCounts {
    fn record(&mut self, passed: bool) {
        self.runs += 1;
        self.passes += usize::from(passed);
    }

    pub fn rate<F: Real>(&self) -> Option<F> {
        (self.runs > 0).then(|| F::from_ratio(self.passes, self.runs))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyRecord {
    pub key: TestKey,
    pub violation_type: String,
    pub state: Phase,
    pub first_seen: Datestamp,
    /// WW-logged runs (exploration + staging).
    pub cumulative: RunCounts,
    pub exploration: RunCounts,
    pub staging: RunCounts,
    /// Deployed-suite runs; not WW-logged.
    pub suite: RunCounts,
    pub staged_on: Option<Datestamp>,
    pub deployed_on: Option<Datestamp>,
}

impl KeyRecord {
    pub fn ever_staged(&self) -> bool {
        self.staged_on.is_some()
    }

    pub fn ever_deployed(&self) -> bool {
        self.deployed_on.is_some()
    }

    pub fn ever_explored(&self) -> bool {
        self.exploration.runs > 0
    }
}

/// Per-key phase state and run counts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseLedger {
    keys: BTreeMap<TestKey, KeyRecord>,
}

impl PhaseLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &TestKey) -> Option<&KeyRecord> {
        self.keys.get(key)
    }

    pub fn records(&self) -> impl Iterator<Item = &KeyRecord> + '_ {
        self.keys.values()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    fn entry(&mut self, key: &TestKey, day: Datestamp, violations: &ViolationMap) -> &mut KeyRecord {
        self.keys.entry(key.clone()).or_insert_with(|| KeyRecord {
            key: key.clone(),
            violation_type: violations.violation_type(key.report_tags()).to_owned(),
            state: Phase::Exploration,
            first_seen: day,
            cumulative: RunCounts::default(),
            exploration: RunCounts::default(),
            staging: RunCounts::default(),
            suite: RunCounts::default(),
            staged_on: None,
            deployed_on: None,
        })
    }

    pub fn record_run(&mut self, key: &TestKey, phase: Phase, day: Datestamp, passed: bool, violations: &ViolationMap) {
        let rec = self.entry(key, day, violations);
        match phase {
            Phase::Exploration => {
                rec.exploration.record(passed);
                rec.cumulative.record(passed);
            }
            Phase::Staging => {
                rec.staging.record(passed);
                rec.cumulative.record(passed);
            }
            Phase::Deployed | Phase::Retired => rec.suite.record(passed),
        }
    }

    /// Move `key` forward to `phase`. Backward moves are ignored.
    fn advance(&mut self, key: &TestKey, phase: Phase, day: Datestamp, violations: &ViolationMap) -> bool {
        let rec = self.entry(key, day, violations);
        if phase <= rec.state {
            return false;
        }
        rec.state = phase;
        match phase {
            Phase::Staging => rec.staged_on = Some(day),
            Phase::Deployed => {
                rec.staged_on.get_or_insert(day);
                rec.deployed_on = Some(day);
            }
            _ => {}
        }
        true
    }

    /// Take a deployed key out of the suite for good.
    pub fn retire(&mut self, key: &TestKey) -> bool {
        match self.keys.get_mut(key) {
            Some(rec) if rec.state == Phase::Deployed => {
                rec.state = Phase::Retired;
                true
            }
            _ => false,
        }
    }

    pub fn keys_in(&self, phase: Phase) -> impl Iterator<Item = &TestKey> + '_ {
        self.keys.values().filter(move |r| r.state == phase).map(|r| &r.key)
    }

    /// Keys removed from exploration: deployed or retired.
    pub fn excluded(&self) -> BTreeSet<TestKey> {
        self.keys
            .values()
            .filter(|r| r.state >= Phase::Deployed)
            .map(|r| r.key.clone())
            .collect()
    }

    pub fn to_json(&self) -> String {
        let records: Vec<&KeyRecord> = self.keys.values().collect();
        let mut s = serde_json::to_string_pretty(&records).expect("ledger serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        let records: Vec<KeyRecord> = serde_json::from_str(s)?;
        Ok(PhaseLedger {
            keys: records.into_iter().map(|r| (r.key.clone(), r)).collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Rules, noise, faults and platform settings shared by every execution.
#[derive(Debug, Clone, Default)]
pub struct Environment {
    pub rules: RuleTable,
    pub noise: NoiseModel,
    pub faults: FaultPlan,
    pub platform: PlatformConfig,
}

impl Environment {
    pub fn new(rules: RuleTable) -> Self {
        Environment {
            rules,
            ..Default::default()
        }
    }

    pub fn factory(&self, day: Datestamp) -> PlatformFactory<'_> {
        PlatformFactory::new(&self.rules, &self.noise, &self.faults, day).with_config(self.platform)
    }
}

fn phase_code(p: Phase) -> u64 {
    p as u64
}

/// Execute `tests` on fresh instances. Results come back in input order
/// whatever the scheduling.
fn execute_batch(
    env: &Environment,
    day: Datestamp,
    phase: Phase,
    round: u64,
    seed: u64,
    tests: &[InferredTest],
) -> Vec<bool> {
    let factory = env.factory(day);
    tests
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let s = seeds::derive(seed, "exec", &[u64::from(day.0), phase_code(phase), round, i as u64]);
            t.oracle.evaluate(&execute_activity(&factory, &t.activity, s)).passed()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ExploredTest<F> {
    pub round: usize,
    pub candidate: ScoredCandidate<F>,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct ExplorationOutcome<F> {
    pub executed: Vec<ExploredTest<F>>,
    pub model: Option<ClusterModel>,
}

/// Day-`t` datapoints not in `exclude`, in log order, optionally one per key.
fn candidate_pool(production: &ProductionLogStore, t: Datestamp, exclude: &BTreeSet<TestKey>, distinct: bool) -> Vec<Datapoint> {
    let mut seen = BTreeSet::new();
    production
        .day(t)
        .filter(|x| !exclude.contains(x.key()))
        .filter(|x| !distinct || seen.insert(x.key()))
        .cloned()
        .collect()
}

pub fn previous_day_keys<'a>(
    source: AnomalySource,
    t: Datestamp,
    production: &'a ProductionLogStore,
    ww: &'a WWLogStore,
) -> Vec<&'a TestKey> {
    let Some(prev) = t.prev() else {
        return Vec::new();
    };
    match source {
        AnomalySource::Production => production.day(prev).map(Datapoint::key).collect(),
        AnomalySource::WwLogs => ww.day_slice(prev).into_iter().map(|e| &e.key).collect(),
    }
}

/// Fit the day's cluster model on the (content, violation) pairs of the
/// non-excluded production datapoints in the trailing window, with
/// multiplicity.
pub fn fit_day_model<F: Real>(
    production: &ProductionLogStore,
    t: Datestamp,
    exclude: &BTreeSet<TestKey>,
    violations: &ViolationMap,
    cfg: &PipelineConfig<F>,
) -> Result<Option<ClusterModel>> {
    let first = t.0.saturating_sub(cfg.cluster_window_days.max(1) - 1);
    let points: Vec<CategoricalPoint> = (first..=t.0)
        .flat_map(|d| production.day(Datestamp(d)))
        .filter(|x| !exclude.contains(x.key()))
        .map(|x| pair_of(x.key(), violations))
        .collect();
    if points.is_empty() {
        return Ok(None);
    }
    let seed = seeds::derive(cfg.seed, "clustering", &[u64::from(t.0)]);
    cfg.k_policy.fit(&points, seed, cfg.kmodes_restarts).map(Some)
}

/// Sample and execute up to N day-`t` datapoints, appending one WW entry per
/// execution.
#[allow(clippy::too_many_arguments)]
pub fn run_exploration_day<F: Real>(
    t: Datestamp,
    production: &ProductionLogStore,
    ww: &mut WWLogStore,
    ledger: &mut PhaseLedger,
    cfg: &PipelineConfig<F>,
    env: &Environment,
    violations: &ViolationMap,
) -> Result<ExplorationOutcome<F>> {
    let mut outcome = ExplorationOutcome {
        executed: Vec::new(),
        model: None,
    };
    if production.day(t).next().is_none() {
        warn!(day = t.0, "no production datapoints; skipping exploration");
        return Ok(outcome);
    }
    if cfg.sample_size == 0 {
        return Ok(outcome);
    }
    let exclude = ledger.excluded();
    let mut pool = candidate_pool(production, t, &exclude, cfg.distinct_candidates);
    if pool.is_empty() {
        return Ok(outcome);
    }
    let Some(model) = fit_day_model(production, t, &exclude, violations, cfg)? else {
        return Ok(outcome);
    };
    debug!(day = t.0, k = model.k(), candidates = pool.len(), "fitted day model");
    let previous = previous_day_keys(cfg.anomaly_source, t, production, ww);
    let previous: Vec<TestKey> = previous.into_iter().cloned().collect();
    let batch = cfg.batch_size.unwrap_or(cfg.sample_size).max(1);

    let mut remaining = cfg.sample_size;
    let mut round = 0usize;
    while remaining > 0 && !pool.is_empty() {
        let take = batch.min(remaining);
        let scored: Vec<ScoredCandidate<F>> = {
            let day_slice = ww.day_slice(t);
            let ctx = ScoringContext::new(&day_slice, violations, &model, &previous);
            pool.iter().map(|x| ctx.score(x, &cfg.weights)).collect()
        };
        let sample_seed = seeds::derive(cfg.seed, "sampler", &[u64::from(t.0), round as u64]);
        let mut picked = sample_top_n(scored, take, sample_seed, &exclude);
        if picked.is_empty() {
            break;
        }
        picked.sort_by(|a, b| a.datapoint.key().cmp(b.datapoint.key()));
        let tests: Vec<InferredTest> = picked.iter().map(|c| instantiate(&c.datapoint)).collect();
        let verdicts = execute_batch(env, t, Phase::Exploration, round as u64, cfg.seed, &tests);
        for c in &picked {
            if let Some(i) = pool.iter().position(|x| x == &c.datapoint) {
                pool.remove(i);
            }
        }
        for (c, passed) in picked.into_iter().zip(verdicts) {
            let key = c.datapoint.key().clone();
            ledger.record_run(&key, Phase::Exploration, t, passed, violations);
            ww.append(WWLogEntry { key, day: t, passed });
            outcome.executed.push(ExploredTest {
                round,
                candidate: c,
                passed,
            });
        }
        remaining -= take.min(remaining);
        round += 1;
    }
    outcome.model = Some(model);
    Ok(outcome)
}

fn scope_counts<'a>(entries: impl IntoIterator<Item = &'a WWLogEntry>) -> BTreeMap<&'a TestKey, RunCounts> {
    let mut m: BTreeMap<&TestKey, RunCounts> = BTreeMap::new();
    for e in entries {
        m.entry(&e.key).or_default().record(e.passed);
    }
    m
}

fn passes_thresholds<F: Real>(c: &RunCounts, n: usize, p: F) -> bool {
    c.runs > n && c.rate::<F>().is_some_and(|rho| rho > p)
}

/// Keys run on day `t` with eta > n_s and rho > p_s in the staging scope.
pub fn tests_of_interest<F: Real>(t: Datestamp, ww: &WWLogStore, cfg: &PipelineConfig<F>) -> BTreeSet<TestKey> {
    let today: BTreeSet<&TestKey> = ww.day_slice(t).into_iter().map(|e| &e.key).collect();
    let counts = match cfg.staging_scope {
        StagingScope::Day => scope_counts(ww.day_slice(t)),
        StagingScope::Cumulative => scope_counts(ww.all().iter().filter(|e| e.day <= t)),
    };
    today
        .into_iter()
        .filter(|k| counts.get(k).is_some_and(|c| passes_thresholds(c, cfg.n_s, cfg.p_s)))
        .cloned()
        .collect()
}

/// Re-run each key `reruns_per_key` times, moving it into staging.
#[allow(clippy::too_many_arguments)]
pub fn run_staging(
    t: Datestamp,
    keys: &BTreeSet<TestKey>,
    reruns_per_key: usize,
    ww: &mut WWLogStore,
    ledger: &mut PhaseLedger,
    env: &Environment,
    violations: &ViolationMap,
    seed: u64,
) -> Vec<WWLogEntry> {
    let mut tests = Vec::with_capacity(keys.len() * reruns_per_key);
    for key in keys {
        ledger.advance(key, Phase::Staging, t, violations);
        let test = instantiate(&Datapoint::new(t, key.clone()));
        tests.extend(std::iter::repeat_n(test, reruns_per_key));
    }
    let verdicts = execute_batch(env, t, Phase::Staging, 0, seed, &tests);
    let mut out = Vec::with_capacity(tests.len());
    for (test, passed) in tests.into_iter().zip(verdicts) {
        ledger.record_run(&test.key, Phase::Staging, t, passed, violations);
        let e = WWLogEntry {
            key: test.key,
            day: t,
            passed,
        };
        ww.append(e.clone());
        out.push(e);
    }
    out
}

/// Keys re-run by the staging pass on day `t`: today's tests of interest
/// plus earlier staged keys whose cumulative pass rate still clears `p_s`.
pub fn staging_set<F: Real>(t: Datestamp, ww: &WWLogStore, ledger: &PhaseLedger, cfg: &PipelineConfig<F>) -> BTreeSet<TestKey> {
    let mut keys = tests_of_interest(t, ww, cfg);
    for rec in ledger.records().filter(|r| r.state == Phase::Staging) {
        if rec.cumulative.rate::<F>().is_some_and(|rho| rho > cfg.p_s) {
            keys.insert(rec.key.clone());
        }
    }
    let excluded = ledger.excluded();
    keys.retain(|k| !excluded.contains(k));
    keys
}

#[derive(Debug, Default)]
pub struct PromotionOutcome {
    pub promoted: Vec<InferredTest>,
    pub failed: Vec<(TestKey, Error)>,
}

/// Promote staged keys with cumulative eta > n_d and rho > p_d. When `out`
/// is given each test file is written first; a write failure leaves that
/// key's ledger state untouched.
pub fn promote_to_deployment<F: Real>(
    t: Datestamp,
    ww: &WWLogStore,
    ledger: &mut PhaseLedger,
    cfg: &PipelineConfig<F>,
    violations: &ViolationMap,
    out: Option<&Path>,
) -> PromotionOutcome {
    let counts = scope_counts(ww.all().iter().filter(|e| e.day <= t));
    let ready: Vec<(TestKey, RunCounts, Datestamp)> = ledger
        .records()
        .filter(|r| r.state == Phase::Staging)
        .filter_map(|r| {
            let c = counts.get(&r.key).copied()?;
            passes_thresholds(&c, cfg.n_d, cfg.p_d).then(|| (r.key.clone(), c, r.first_seen))
        })
        .collect();
    let mut outcome = PromotionOutcome::default();
    for (key, c, first_day) in ready {
        let test = instantiate(&Datapoint::new(first_day, key.clone()));
        if let Some(dir) = out {
            let stats = TestStats {
                eta: c.runs,
                rho: c.rate::<F>().expect("runs > n_d >= 1"),
                first_day,
            };
            if let Err(e) = emit_test_file(&test, &stats, dir) {
                outcome.failed.push((key, e));
                continue;
            }
        }
        ledger.advance(&key, Phase::Deployed, t, violations);
        outcome.promoted.push(test);
    }
    outcome
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteFailure {
    pub key: TestKey,
    pub trace: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SuiteReport {
    pub day: Datestamp,
    pub results: Vec<(TestKey, bool)>,
    pub failures: Vec<SuiteFailure>,
}

impl SuiteReport {
    pub fn failed_keys(&self) -> BTreeSet<&TestKey> {
        self.failures.iter().map(|f| &f.key).collect()
    }
}

/// Run every deployed test once on `factory`'s day.
pub fn run_deployed_suite(tests: &[InferredTest], factory: &PlatformFactory<'_>, seed: u64) -> SuiteReport {
    let traces: Vec<_> = tests
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let s = seeds::derive(seed, "suite", &[u64::from(factory.day.0), i as u64]);
            let trace = execute_activity(factory, &t.activity, s);
            (t.oracle.evaluate(&trace).passed(), trace)
        })
        .collect();
    let mut report = SuiteReport {
        day: factory.day,
        ..Default::default()
    };
    for (t, (passed, trace)) in tests.iter().zip(traces) {
        report.results.push((t.key.clone(), passed));
        if !passed {
            report.failures.push(SuiteFailure {
                key: t.key.clone(),
                trace: format!("expected [{}]; {}", t.oracle.expected().join(", "), trace.summary()),
            });
        }
    }
    report
}

/// Everything produced by one simulated day.
#[derive(Debug)]
pub struct DayOutcome<F> {
    pub day: Datestamp,
    pub exploration: ExplorationOutcome<F>,
    pub staged: BTreeSet<TestKey>,
    pub staging_runs: usize,
    pub promotion: PromotionOutcome,
    pub suite: SuiteReport,
}

/// The three-phase pipeline with its stores and ledger.
#[derive(Debug)]
pub struct Pipeline<F: Real> {
    pub config: PipelineConfig<F>,
    pub env: Environment,
    pub violations: ViolationMap,
    pub production: ProductionLogStore,
    pub ww: WWLogStore,
    pub ledger: PhaseLedger,
    deployed: Vec<InferredTest>,
}

impl<F: Real> Pipeline<F> {
    pub fn new(config: PipelineConfig<F>, env: Environment, violations: ViolationMap) -> Self {
        Pipeline {
            config,
            env,
            violations,
            production: ProductionLogStore::new(),
            ww: WWLogStore::new(),
            ledger: PhaseLedger::new(),
            deployed: Vec::new(),
        }
    }

    pub fn deployed_tests(&self) -> &[InferredTest] {
        &self.deployed
    }

    pub fn ingest(&mut self, datapoints: impl IntoIterator<Item = Datapoint>) {
        self.production.extend(datapoints);
    }

    pub fn retire(&mut self, key: &TestKey) -> bool {
        let done = self.ledger.retire(key);
        if done {
            self.deployed.retain(|t| &t.key != key);
        }
        done
    }

    /// Exploration, staging, promotion and the deployed suite for day `t`.
    /// Production logs for `t` must already be ingested.
    pub fn run_day(&mut self, t: Datestamp, emit_dir: Option<&Path>) -> Result<DayOutcome<F>> {
        let exploration = run_exploration_day(
            t,
            &self.production,
            &mut self.ww,
            &mut self.ledger,
            &self.config,
            &self.env,
            &self.violations,
        )?;
        let staged = staging_set(t, &self.ww, &self.ledger, &self.config);
        let staging_runs = run_staging(
            t,
            &staged,
            self.config.reruns_per_key,
            &mut self.ww,
            &mut self.ledger,
            &self.env,
            &self.violations,
            self.config.seed,
        )
        .len();
        let promotion = promote_to_deployment(t, &self.ww, &mut self.ledger, &self.config, &self.violations, emit_dir);
        self.deployed.extend(promotion.promoted.iter().cloned());
        let suite = run_deployed_suite(&self.deployed, &self.env.factory(t), self.config.seed);
        for (key, passed) in &suite.results {
            self.ledger.record_run(key, Phase::Deployed, t, *passed, &self.violations);
        }
        Ok(DayOutcome {
            day: t,
            exploration,
            staged,
            staging_runs,
            promotion,
            suite,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::log_model::{canonicalize, RawDatapoint};
    use crate::sim_platform::{FaultEffect, FaultInjection, RuleKey};

    fn key(tag: &str) -> TestKey {
        TestKey::new("Photo", &[tag], "delete", &["Delete"]).unwrap()
    }

    fn entry(tag: &str, day: u32, passed: bool) -> WWLogEntry {
        WWLogEntry {
            key: key(tag),
            day: Datestamp(day),
            passed,
        }
    }

    fn store(entries: impl IntoIterator<Item = WWLogEntry>) -> WWLogStore {
        let mut s = WWLogStore::new();
        s.extend(entries);
        s
    }

    #[test]
    fn eta_counts_and_partitions() {
        let s = store([entry("a", 1, true), entry("a", 1, false), entry("a", 2, true), entry("b", 1, true)]);
        assert_eq!(compute_eta(&key("zzz"), s.all()), 0);
        assert_eq!(compute_eta(&key("a"), s.day_slice(Datestamp(1))), 2);
        let by_day: usize = s.days().map(|t| compute_eta(&key("a"), s.day_slice(t))).sum();
        assert_eq!(by_day, compute_eta(&key("a"), s.all()));
    }

    #[test]
    fn rho_by_enumeration() {
        let s = store([entry("a", 1, true), entry("a", 1, false), entry("a", 1, true), entry("b", 1, true)]);
        let rho: f64 = compute_rho(&key("a"), s.all()).unwrap();
        assert!((rho - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(compute_rho::<f64>(&key("b"), s.all()).unwrap(), 1.0);
        assert!(matches!(compute_rho::<f64>(&key("c"), s.all()), Err(Error::UndefinedRate)));
    }

    fn cfg() -> PipelineConfig<f64> {
        PipelineConfig {
            staging_scope: StagingScope::Day,
            ..Default::default()
        }
    }

    #[test]
    fn tests_of_interest_uses_strict_thresholds() {
        // a: 11 runs all pass; b: exactly 10 runs; c: 20 runs with 18 passes (rho = 0.9)
        let mut es = Vec::new();
        es.extend((0..11).map(|_| entry("a", 3, true)));
        es.extend((0..10).map(|_| entry("b", 3, true)));
        es.extend((0..20).map(|i| entry("c", 3, i >= 2)));
        let s = store(es);
        let toi = tests_of_interest(Datestamp(3), &s, &cfg());
        assert_eq!(toi, [key("a")].into());
        assert!(tests_of_interest(Datestamp(4), &s, &cfg()).is_empty());
    }

    #[test]
    fn cumulative_scope_counts_earlier_days() {
        let mut es: Vec<_> = (0..10).map(|d| entry("a", d, true)).collect();
        es.push(entry("a", 10, true));
        let s = store(es);
        let cumulative = PipelineConfig::<f64>::default();
        assert_eq!(tests_of_interest(Datestamp(10), &s, &cumulative), [key("a")].into());
        assert!(tests_of_interest(Datestamp(10), &s, &cfg()).is_empty());
    }

    fn env() -> Environment {
        let mut rules = RuleTable::new();
        for tag in ["a", "b", "c", "d"] {
            rules = rules.with("Photo", &[tag], "delete", &["Delete"]);
        }
        Environment::new(rules)
    }

    #[test]
    fn cluster_window_reaches_back() {
        let mut production = ProductionLogStore::new();
        for (d, tag) in [(0, "a"), (1, "b")] {
            let k = TestKey::new("Photo", &[tag], "delete", &["Delete"]).unwrap();
            production.extend([Datapoint::new(Datestamp(d), k)]);
        }
        let mut v = ViolationMap::default();
        v.insert(&["a"], "A");
        v.insert(&["b"], "B");
        let mut c = PipelineConfig::<f64> {
            k_policy: KPolicy::Fixed { k: 2 },
            ..Default::default()
        };
        let fit = |c: &PipelineConfig<f64>| fit_day_model(&production, Datestamp(1), &BTreeSet::new(), &v, c).unwrap().unwrap();
        assert_eq!(fit(&c).k(), 1);
        c.cluster_window_days = 2;
        assert_eq!(fit(&c).k(), 2);
        c.cluster_window_days = 0;
        assert!(!c.check().0.is_empty());
    }

    #[test]
    fn staging_cardinality_and_zero_noise_rates() {
        let env = env();
        let v = ViolationMap::default();
        let mut ww = WWLogStore::new();
        let mut ledger = PhaseLedger::new();
        let keys: BTreeSet<TestKey> = ["a", "b", "c", "d"].iter().map(|t| key(t)).collect();
        let new = run_staging(Datestamp(2), &keys, 5, &mut ww, &mut ledger, &env, &v, 0);
        assert_eq!(new.len(), 20);
        assert_eq!(ww.len(), 20);
        for k in &keys {
            assert_eq!(compute_rho::<f64>(k, ww.all()).unwrap(), 1.0);
            assert_eq!(ledger.get(k).unwrap().state, Phase::Staging);
        }
    }

    #[test]
    fn staging_a_faulted_key_lowers_its_rate() {
        let mut env = env();
        env.faults.push(FaultInjection {
            day: Datestamp(5),
            key: RuleKey::new("Photo", &["a"], "delete"),
            effect: FaultEffect::SuppressActions,
        });
        let v = ViolationMap::default();
        let mut ww = store((0..12).map(|d| entry("a", d, true)));
        let mut ledger = PhaseLedger::new();
        let before: f64 = compute_rho(&key("a"), ww.all()).unwrap();
        let keys: BTreeSet<TestKey> = [key("a")].into();
        run_staging(Datestamp(5), &keys, 5, &mut ww, &mut ledger, &env, &v, 0);
        let after: f64 = compute_rho(&key("a"), ww.all()).unwrap();
        // 12 passes then 5 failures
        assert_eq!(before, 1.0);
        assert!((after - 12.0 / 17.0).abs() < 1e-15);
    }

    #[test]
    fn promotion_thresholds_are_strict() {
        let v = ViolationMap::default();
        let mut ledger = PhaseLedger::new();
        // a: 51 runs, 50 passes (0.98); b: 60 runs, 57 passes (0.95); c: 50 runs all pass
        let mut es = Vec::new();
        es.extend((0..51).map(|i| entry("a", 1, i != 0)));
        es.extend((0..60).map(|i| entry("b", 1, i >= 3)));
        es.extend((0..50).map(|_| entry("c", 1, true)));
        let ww = store(es);
        for t in ["a", "b", "c"] {
            ledger.advance(&key(t), Phase::Staging, Datestamp(1), &v);
        }
        let dir = tempfile::tempdir().unwrap();
        let out = promote_to_deployment(Datestamp(1), &ww, &mut ledger, &cfg(), &v, Some(dir.path()));
        let promoted: Vec<&TestKey> = out.promoted.iter().map(|t| &t.key).collect();
        assert_eq!(promoted, [&key("a")]);
        assert_eq!(ledger.get(&key("a")).unwrap().state, Phase::Deployed);
        assert_eq!(ledger.get(&key("b")).unwrap().state, Phase::Staging);
        assert!(dir.path().join(crate::template::test_file_name(&key("a"))).exists());
        assert_eq!(ledger.excluded(), [key("a")].into());
    }

    #[test]
    fn failed_emission_leaves_ledger_untouched() {
        let v = ViolationMap::default();
        let mut ledger = PhaseLedger::new();
        let ww = store((0..60).map(|_| entry("a", 1, true)));
        ledger.advance(&key("a"), Phase::Staging, Datestamp(1), &v);
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("missing");
        let out = promote_to_deployment(Datestamp(1), &ww, &mut ledger, &cfg(), &v, Some(&missing));
        assert!(out.promoted.is_empty());
        assert_eq!(out.failed.len(), 1);
        assert_eq!(ledger.get(&key("a")).unwrap().state, Phase::Staging);
    }

    #[test]
    fn ledger_moves_only_forward() {
        let v = ViolationMap::default();
        let mut l = PhaseLedger::new();
        assert!(l.advance(&key("a"), Phase::Deployed, Datestamp(1), &v));
        assert!(!l.advance(&key("a"), Phase::Staging, Datestamp(2), &v));
        assert_eq!(l.get(&key("a")).unwrap().state, Phase::Deployed);
        assert!(l.get(&key("a")).unwrap().ever_staged());
        assert!(l.retire(&key("a")));
        assert!(!l.retire(&key("a")));
        assert_eq!(l.excluded().len(), 1);
        let back = PhaseLedger::from_json(&l.to_json()).unwrap();
        assert_eq!(back, l);
    }

    fn production(env: &Environment, day: u32, copies: usize) -> ProductionLogStore {
        let mut p = ProductionLogStore::new();
        for (i, (k, a)) in env.rules.iter().enumerate() {
            for _ in 0..copies {
                let x = canonicalize(&RawDatapoint::new(day, &k.content_type, &k.report_tags, &k.decision, a)).unwrap();
                p.append(x);
            }
            // an extra distinct key per rule
            let _ = i;
        }
        p
    }

    #[test]
    fn exploration_cardinality() {
        let mut rules = RuleTable::new();
        for i in 0..200 {
            rules = rules.with("Photo", &[format!("t{i:03}")], "delete", &["Delete"]);
        }
        let env = Environment::new(rules);
        let v = ViolationMap::default();
        let prod = production(&env, 0, 1);
        let mut ww = WWLogStore::new();
        let mut ledger = PhaseLedger::new();
        let cfg = PipelineConfig::<f64> {
            sample_size: 50,
            batch_size: Some(10),
            k_policy: KPolicy::Fixed { k: 1 },
            ..Default::default()
        };
        let out = run_exploration_day(Datestamp(0), &prod, &mut ww, &mut ledger, &cfg, &env, &v).unwrap();
        assert_eq!(out.executed.len(), 50);
        assert_eq!(ww.day_slice(Datestamp(0)).len(), 50);
        let distinct: BTreeSet<_> = ww.all().iter().map(|e| &e.key).collect();
        assert_eq!(distinct.len(), 50);
        assert!(ww.all().iter().all(|e| e.passed));
    }

    #[test]
    fn exploration_noops() {
        let env = env();
        let v = ViolationMap::default();
        let prod = production(&env, 0, 3);
        let mut ww = WWLogStore::new();
        let mut ledger = PhaseLedger::new();
        let zero = PipelineConfig::<f64> {
            sample_size: 0,
            ..Default::default()
        };
        run_exploration_day(Datestamp(0), &prod, &mut ww, &mut ledger, &zero, &env, &v).unwrap();
        assert!(ww.is_empty());
        // empty production day
        run_exploration_day(Datestamp(7), &prod, &mut ww, &mut ledger, &cfg(), &env, &v).unwrap();
        assert!(ww.is_empty());
        // all candidates retired
        for (k, a) in env.rules.iter() {
            let key = TestKey::new(&k.content_type, &k.report_tags, &k.decision, a).unwrap();
            ledger.advance(&key, Phase::Deployed, Datestamp(0), &v);
        }
        run_exploration_day(Datestamp(0), &prod, &mut ww, &mut ledger, &cfg(), &env, &v).unwrap();
        assert!(ww.is_empty());
    }

    #[test]
    fn deployed_suite_reports_faults() {
        let mut env = env();
        let tests: Vec<InferredTest> = ["a", "b"]
            .iter()
            .map(|t| instantiate(&Datapoint::new(Datestamp(0), key(t))))
            .collect();
        assert_eq!(run_deployed_suite(&[], &env.factory(Datestamp(0)), 0), SuiteReport::default());
        let clean = run_deployed_suite(&tests, &env.factory(Datestamp(3)), 0);
        assert_eq!(clean.results.len(), 2);
        assert!(clean.failures.is_empty());
        env.faults.push(FaultInjection {
            day: Datestamp(3),
            key: RuleKey::new("Photo", &["b"], "delete"),
            effect: FaultEffect::MutateActions(vec!["Warn".into()]),
        });
        let before = run_deployed_suite(&tests, &env.factory(Datestamp(2)), 0);
        assert!(before.failures.is_empty());
        let after = run_deployed_suite(&tests, &env.factory(Datestamp(3)), 0);
        assert_eq!(after.failed_keys(), [&key("b")].into());
        assert!(after.failures[0].trace.contains("Warn"));
    }

    #[test]
    fn config_checks() {
        let (errs, warns) = PipelineConfig::<f64>::default().check();
        assert!(errs.is_empty() && warns.is_empty());
        let bad = PipelineConfig::<f64> {
            weights: ScoreWeights {
                alpha: 0.4,
                beta: 0.4,
                gamma: 0.4,
            },
            p_s: 1.5,
            n_d: 5,
            ..Default::default()
        };
        let (errs, warns) = bad.check();
        assert_eq!(errs.len(), 2, "{errs:?}");
        assert!(errs[0].contains("alpha + beta + gamma"));
        // n_d < n_s, and p_d < p_s
        assert_eq!(warns.len(), 2);
    }
}
