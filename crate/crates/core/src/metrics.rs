//! Coverage, funnel and distribution reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::log_model::{Datestamp, ProductionLogStore, TestKey, ViolationMap, WWLogEntry, WWLogStore};
use crate::pipeline::{KeyRecord, Phase, PhaseLedger, RunCounts};
use crate::scalar::Real;

/// Denominator set for coverage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageUniverse {
    /// Everything seen in production logs to date.
    #[default]
    Production,
    /// Everything executed in the WW logs to date.
    WwLogs,
}

/// Violation types and (content type, violation type) pairs that coverage
/// is measured against.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CoverageBase {
    pub violation_types: BTreeSet<String>,
    pub pairs: BTreeSet<(String, String)>,
}

impl CoverageBase {
    pub fn add_key(&mut self, key: &TestKey, v: &ViolationMap) {
        let vt = v.violation_type(key.report_tags()).to_owned();
        self.pairs.insert((key.content_type().to_owned(), vt.clone()));
        self.violation_types.insert(vt);
    }

    pub fn from_keys<'a>(keys: impl IntoIterator<Item = &'a TestKey>, v: &ViolationMap) -> Self {
        let mut b = CoverageBase::default();
        for k in keys {
            b.add_key(k, v);
        }
        b
    }

    pub fn from_ww(ww: &WWLogStore, up_to: Datestamp, v: &ViolationMap) -> Self {
        Self::from_keys(ww.all().iter().filter(|e| e.day <= up_to).map(|e| &e.key), v)
    }

    pub fn from_production(p: &ProductionLogStore, up_to: Datestamp, v: &ViolationMap) -> Self {
        Self::from_keys(p.iter().filter(|x| x.t() <= up_to).map(|x| x.key()), v)
    }

    pub fn is_empty(&self) -> bool {
        self.violation_types.is_empty()
    }
}

fn ratio<F: Real>(covered: usize, universe: usize) -> Result<F> {
    if universe == 0 {
        return Err(Error::UndefinedCoverage);
    }
    Ok(F::from_ratio(covered.min(universe), universe))
}

/// Share of the universe's violation types that appear in `day`.
pub fn violation_coverage_mu<F: Real>(day: &[&WWLogEntry], v: &ViolationMap, universe: &CoverageBase) -> Result<F> {
    let seen = CoverageBase::from_keys(day.iter().map(|e| &e.key), v);
    let covered = seen.violation_types.intersection(&universe.violation_types).count();
    ratio(covered, universe.violation_types.len())
}

/// Share of the universe's (content, violation) pairs that appear in `day`.
pub fn cross_product_coverage_nu<F: Real>(day: &[&WWLogEntry], v: &ViolationMap, universe: &CoverageBase) -> Result<F> {
    let seen = CoverageBase::from_keys(day.iter().map(|e| &e.key), v);
    let covered = seen.pairs.intersection(&universe.pairs).count();
    ratio(covered, universe.pairs.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow<F> {
    pub day: Datestamp,
    pub mu: F,
    pub nu: F,
    pub sampled: usize,
    pub distinct_violation_types: usize,
    pub distinct_pairs: usize,
}

pub const COVERAGE_HEADER: &str = "day,mu,nu,sampled,distinct_violation_types,distinct_pairs";

/// Coverage for the keys in `day` (a WW day slice, or any key list such as
/// a fixed suite). Undefined coverage reports as 0.
pub fn coverage_row<F: Real>(t: Datestamp, day: &[&WWLogEntry], v: &ViolationMap, universe: &CoverageBase) -> CoverageRow<F> {
    let seen = CoverageBase::from_keys(day.iter().map(|e| &e.key), v);
    CoverageRow {
        day: t,
        mu: violation_coverage_mu(day, v, universe).unwrap_or_else(|_| F::zero()),
        nu: cross_product_coverage_nu(day, v, universe).unwrap_or_else(|_| F::zero()),
        sampled: day.len(),
        distinct_violation_types: seen.violation_types.len(),
        distinct_pairs: seen.pairs.len(),
    }
}

pub fn fmt_real<F: Real>(x: F) -> String {
    format!("{:.6}", x.to_f64().unwrap_or(f64::NAN))
}

fn fmt_opt<F: Real>(x: Option<F>) -> String {
    x.map(fmt_real).unwrap_or_else(|| "null".into())
}

pub fn coverage_csv<F: Real>(rows: &[CoverageRow<F>]) -> String {
    let mut s = String::from(COVERAGE_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.day.0,
            fmt_real(r.mu),
            fmt_real(r.nu),
            r.sampled,
            r.distinct_violation_types,
            r.distinct_pairs
        );
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary<F> {
    pub keys: usize,
    /// Runs made while keys were in this phase (deployment counts suite runs).
    pub runs: usize,
    /// Mean over member keys of their cumulative WW pass rate.
    pub mean_pass_rate: Option<F>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Funnel<F> {
    pub exploration: PhaseSummary<F>,
    pub staging: PhaseSummary<F>,
    pub deployment: PhaseSummary<F>,
}

fn summarize<'a, F: Real>(
    recs: impl Iterator<Item = &'a KeyRecord>,
    member: impl Fn(&KeyRecord) -> bool,
    counts: impl Fn(&KeyRecord) -> RunCounts,
) -> PhaseSummary<F> {
    let mut keys = 0;
    let mut runs = 0;
    let mut rates = Vec::new();
    for r in recs.filter(|r| member(r)) {
        keys += 1;
        runs += counts(r).runs;
        rates.extend(r.cumulative.rate::<F>());
    }
    let mean_pass_rate = (!rates.is_empty()).then(|| {
        let n = F::from_usize(rates.len()).expect("count fits");
        rates.into_iter().fold(F::zero(), |a, b| a + b) / n
    });
    PhaseSummary {
        keys,
        runs,
        mean_pass_rate,
    }
}

/// Keys ever in each phase and the mean cumulative pass rate of those keys.
pub fn phase_funnel<F: Real>(ledger: &PhaseLedger) -> Funnel<F> {
    Funnel {
        exploration: summarize(ledger.records(), KeyRecord::ever_explored, |r| r.exploration),
        staging: summarize(ledger.records(), KeyRecord::ever_staged, |r| r.staging),
        deployment: summarize(ledger.records(), KeyRecord::ever_deployed, |r| r.suite),
    }
}

pub const FUNNEL_HEADER: &str = "phase,keys,runs,mean_pass_rate";

pub fn funnel_csv<F: Real>(f: &Funnel<F>) -> String {
    let mut s = String::from(FUNNEL_HEADER);
    s.push('\n');
    for (name, p) in [("exploration", &f.exploration), ("staging", &f.staging), ("deployment", &f.deployment)] {
        let _ = writeln!(s, "{name},{},{},{}", p.keys, p.runs, fmt_opt(p.mean_pass_rate));
    }
    s
}

/// Category frequencies for the keys that ever reached a phase.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub keys: usize,
    pub content_type: Vec<(String, usize)>,
    pub violation_type: Vec<(String, usize)>,
    pub decision: Vec<(String, usize)>,
    pub actions: Vec<(String, usize)>,
}

fn table(counts: BTreeMap<String, usize>) -> Vec<(String, usize)> {
    let mut rows: Vec<_> = counts.into_iter().collect();
    rows.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    rows
}

pub fn phase_members(ledger: &PhaseLedger, phase: Phase) -> impl Iterator<Item = &KeyRecord> + '_ {
    ledger.records().filter(move |r| match phase {
        Phase::Exploration => r.ever_explored(),
        Phase::Staging => r.ever_staged(),
        Phase::Deployed => r.ever_deployed(),
        Phase::Retired => r.state == Phase::Retired,
    })
}

pub fn distribution_report(phase: Phase, ledger: &PhaseLedger) -> DistributionReport {
    let mut c = BTreeMap::new();
    let mut vt = BTreeMap::new();
    let mut d = BTreeMap::new();
    let mut a = BTreeMap::new();
    let mut keys = 0;
    for r in phase_members(ledger, phase) {
        keys += 1;
        let k = &r.key;
        *c.entry(k.content_type().to_owned()).or_default() += 1;
        *vt.entry(r.violation_type.clone()).or_default() += 1;
        *d.entry(k.decision().to_owned()).or_default() += 1;
        *a.entry(k.actions().join("+")).or_default() += 1;
    }
    DistributionReport {
        keys,
        content_type: table(c),
        violation_type: table(vt),
        decision: table(d),
        actions: table(a),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

pub const DISTRIBUTION_HEADER: &str = "category,value,count";

pub fn distribution_csv(r: &DistributionReport) -> String {
    let mut s = String::from(DISTRIBUTION_HEADER);
    s.push('\n');
    for (cat, rows) in [
        ("content_type", &r.content_type),
        ("violation_type", &r.violation_type),
        ("decision", &r.decision),
        ("actions", &r.actions),
    ] {
        for (value, n) in rows {
            let _ = writeln!(s, "{cat},{},{n}", csv_field(value));
        }
    }
    s
}
