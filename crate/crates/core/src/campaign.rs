//! Campaign configuration and the day loop.
//!
//! A campaign generates production logs for each day, runs exploration,
//! staging, promotion and the deployed suite, and writes the reports.
//! Every random stream is derived from the single campaign seed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tracing::info;

use crate::error::{Error, Result};
use crate::log_model::{Datestamp, TestKey, ViolationMap, WWLogEntry};
use crate::metrics::{
    coverage_csv, coverage_row, distribution_csv, distribution_report, fmt_real, funnel_csv, phase_funnel,
    CoverageBase, CoverageRow, CoverageUniverse, Funnel,
};
use crate::pipeline::{DayOutcome, Environment, Phase, Pipeline, PipelineConfig, SuiteReport};
use crate::scalar::Real;
use crate::seeds;
use crate::sim_platform::{
    generate_production_logs, BimodalNoise, DeviationMode, FaultPlan, GeneratorConfig, NoiseModel, PlatformConfig,
    RuleTable, Universe, UniverseSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    Off,
    Uniform,
    Bimodal,
}

/// Test-environment flakiness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub model: NoiseKind,
    /// Used by the uniform model.
    pub p_flake: f64,
    pub flaky_fraction: f64,
    pub flaky_range: (f64, f64),
    pub stable_range: (f64, f64),
    pub mode: DeviationMode,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        let mix = BimodalNoise::default();
        NoiseConfig {
            model: NoiseKind::Off,
            p_flake: 0.0,
            flaky_fraction: mix.flaky_fraction,
            flaky_range: mix.flaky_range,
            stable_range: mix.stable_range,
            mode: DeviationMode::default(),
        }
    }
}

impl NoiseConfig {
    pub fn bimodal() -> Self {
        NoiseConfig {
            model: NoiseKind::Bimodal,
            ..Default::default()
        }
    }

    fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.p_flake) {
            errs.push(format!("noise.p_flake must be in [0, 1] (got {})", self.p_flake));
        }
        if !unit(self.flaky_fraction) {
            errs.push(format!("noise.flaky_fraction must be in [0, 1] (got {})", self.flaky_fraction));
        }
        for (name, (lo, hi)) in [("flaky_range", self.flaky_range), ("stable_range", self.stable_range)] {
            if !(unit(lo) && unit(hi) && lo <= hi) {
                errs.push(format!("noise.{name} must satisfy 0 <= lo <= hi <= 1 (got [{lo}, {hi}])"));
            }
        }
        errs
    }

    pub fn build(&self, rules: &RuleTable, seed: u64) -> NoiseModel {
        let mut m = match self.model {
            NoiseKind::Off => NoiseModel::off(),
            NoiseKind::Uniform => NoiseModel::uniform(self.p_flake),
            NoiseKind::Bimodal => NoiseModel::bimodal(
                rules,
                BimodalNoise {
                    flaky_fraction: self.flaky_fraction,
                    flaky_range: self.flaky_range,
                    stable_range: self.stable_range,
                },
                seed,
            ),
        };
        m.mode = self.mode;
        m
    }
}

/// Everything a campaign needs. Relative file paths are resolved against
/// the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound = "F: Real")]
pub struct CampaignConfig<F> {
    /// Campaign seed; generator, universe, noise and pipeline seeds are
    /// derived from it and any seeds in those sections are ignored.
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    /// Rule table JSON. When absent the rule table is synthesized from
    /// `universe`.
    pub rules: Option<PathBuf>,
    /// Violation map JSON; required with `rules`, ignored otherwise.
    pub violations: Option<PathBuf>,
    pub faults: Option<PathBuf>,
    /// Days between a fault activating and it showing up in production logs.
    pub production_lag_days: u32,
    pub coverage_universe: CoverageUniverse,
    pub universe: UniverseSpec,
    pub generator: GeneratorConfig,
    pub noise: NoiseConfig,
    pub platform: PlatformConfig,
    pub pipeline: PipelineConfig<F>,
}

impl<F: Real> Default for CampaignConfig<F> {
    fn default() -> Self {
        CampaignConfig {
            seed: 0,
            output_dir: None,
            rules: None,
            violations: None,
            faults: None,
            production_lag_days: 1,
            coverage_universe: CoverageUniverse::default(),
            universe: UniverseSpec::default(),
            generator: GeneratorConfig::default(),
            noise: NoiseConfig::default(),
            platform: PlatformConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

/// A parsed config plus non-fatal findings.
#[derive(Debug, Clone)]
pub struct Validated<F> {
    pub config: CampaignConfig<F>,
    pub warnings: Vec<String>,
}

impl<F: Real> CampaignConfig<F> {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Read a config file and resolve its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&s).map_err(|e| match e {
            Error::Config(msgs) => Error::Config(msgs.into_iter().map(|m| format!("{}: {m}", path.display())).collect()),
            e => e,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.rules, &mut cfg.violations, &mut cfg.faults, &mut cfg.output_dir]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Check every rule and report all violations together.
    pub fn check(&self) -> (Vec<String>, Vec<String>) {
        let (mut errs, mut warns) = self.pipeline.check();
        errs.extend(self.generator.validate());
        errs.extend(self.noise.validate());
        if self.rules.is_none() {
            errs.extend(self.universe.validate());
        } else if self.violations.is_none() {
            errs.push("violations: required when `rules` is given".into());
        }
        for (name, p) in [("rules", &self.rules), ("violations", &self.violations), ("faults", &self.faults)] {
            if let Some(p) = p {
                if !p.is_file() {
                    errs.push(format!("{name}: file not found: {}", p.display()));
                }
            }
        }
        if let Some(out) = &self.output_dir {
            if out.exists() && !out.is_dir() {
                errs.push(format!("output_dir: not a directory: {}", out.display()));
            }
        }
        if self.generator.datapoints_per_day == 0 {
            warns.push("generator.datapoints_per_day is 0: every day will be empty".into());
        }
        (errs, warns)
    }
}

/// Parse and check a config file, collecting every error.
pub fn validate_config<F: Real>(path: &Path) -> Result<Validated<F>> {
    let config = CampaignConfig::<F>::load(path)?;
    let (mut errs, warnings) = config.check();
    if errs.is_empty() {
        if let Err(e) = Campaign::prepare(config.clone()) {
            errs.push(e.to_string());
        }
    }
    if errs.is_empty() {
        Ok(Validated { config, warnings })
    } else {
        Err(Error::Config(errs))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow<F> {
    pub round: usize,
    pub key: TestKey,
    pub violation_type: String,
    pub phi1: F,
    pub phi2: F,
    pub phi3: F,
    pub phi: F,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaySummary<F> {
    pub day: Datestamp,
    pub production: usize,
    pub k: Option<usize>,
    pub cluster_cost: Option<usize>,
    pub samples: Vec<SampleRow<F>>,
    pub staged: usize,
    pub staging_runs: usize,
    pub promoted: Vec<TestKey>,
    pub suite: SuiteReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignReport<F> {
    pub coverage: Vec<CoverageRow<F>>,
    pub funnel: Funnel<F>,
    pub days: Vec<DaySummary<F>>,
}

#[derive(Debug)]
pub struct CampaignRun<F: Real> {
    pub pipeline: Pipeline<F>,
    pub report: CampaignReport<F>,
}

/// A config with its rule table, violation map, faults and noise resolved.
#[derive(Debug, Clone)]
pub struct Campaign<F: Real> {
    pub config: CampaignConfig<F>,
    pub rules: RuleTable,
    pub violations: ViolationMap,
    pub faults: FaultPlan,
    pub noise: NoiseModel,
    generator: GeneratorConfig,
}

impl<F: Real> Campaign<F> {
    pub fn prepare(config: CampaignConfig<F>) -> Result<Self> {
        let seed = config.seed;
        let (rules, violations, ranked) = match (&config.rules, &config.violations) {
            (Some(r), Some(v)) => (RuleTable::load(r)?, ViolationMap::load(v)?, Vec::new()),
            (Some(_), None) => return Err(Error::Config(vec!["violations: required when `rules` is given".into()])),
            _ => {
                let spec = UniverseSpec {
                    seed: seeds::derive(seed, "universe", &[]),
                    ..config.universe.clone()
                };
                let Universe {
                    rules,
                    violations,
                    content_types,
                } = spec.build();
                (rules, violations, content_types)
            }
        };
        let faults = match &config.faults {
            Some(p) => FaultPlan::load(p)?,
            None => FaultPlan::none(),
        };
        let noise = config.noise.build(&rules, seeds::derive(seed, "noise", &[]));
        let mut generator = config.generator.clone();
        generator.seed = seeds::derive(seed, "generator", &[]);
        if generator.content_types.is_empty() {
            generator.content_types = ranked;
        }
        for c in &generator.content_types {
            if !rules.has_content_type(c) {
                return Err(Error::Config(vec![format!(
                    "generator.content_types: `{c}` has no rules"
                )]));
            }
        }
        Ok(Campaign {
            config,
            rules,
            violations,
            faults,
            noise,
            generator,
        })
    }

    pub fn generator(&self) -> &GeneratorConfig {
        &self.generator
    }

    fn pipeline_config(&self) -> PipelineConfig<F> {
        PipelineConfig {
            seed: seeds::derive(self.config.seed, "pipeline", &[]),
            ..self.config.pipeline.clone()
        }
    }

    /// Production datapoints for day `t`. Faults reach production logs
    /// `production_lag_days` after they activate.
    pub fn production_day(&self, t: Datestamp) -> Vec<crate::log_model::Datapoint> {
        let rules = match t.0.checked_sub(self.config.production_lag_days) {
            Some(d) => self.rules.with_faults(&self.faults, Datestamp(d)),
            None => self.rules.clone(),
        };
        generate_production_logs(&self.generator, &rules, t)
    }

    fn universe(&self, pipeline: &Pipeline<F>, t: Datestamp) -> CoverageBase {
        match self.config.coverage_universe {
            CoverageUniverse::Production => CoverageBase::from_production(&pipeline.production, t, &self.violations),
            CoverageUniverse::WwLogs => CoverageBase::from_ww(&pipeline.ww, t, &self.violations),
        }
    }

    /// Run the full day loop. Test files are written under `out/tests`
    /// when `out` is given; call [`write_reports`] for the CSVs.
    pub fn run(&self, out: Option<&Path>) -> Result<CampaignRun<F>> {
        let env = Environment {
            rules: self.rules.clone(),
            noise: self.noise.clone(),
            faults: self.faults.clone(),
            platform: self.config.platform,
        };
        let mut pipeline = Pipeline::new(self.pipeline_config(), env, self.violations.clone());
        let tests_dir = match out {
            Some(o) => Some(prepare_tests_dir(o)?),
            None => None,
        };
        let mut coverage = Vec::new();
        let mut days = Vec::new();
        for d in 0..self.config.pipeline.horizon_days {
            let t = Datestamp(d);
            let prod = self.production_day(t);
            let production = prod.len();
            pipeline.ingest(prod);
            let outcome = pipeline.run_day(t, tests_dir.as_deref())?;
            if let Some((key, e)) = outcome.promotion.failed.first() {
                return Err(Error::Config(vec![format!("emitting test for {key}: {e}")]));
            }
            let universe = self.universe(&pipeline, t);
            let row: CoverageRow<F> = coverage_row(t, &pipeline.ww.day_slice(t), &self.violations, &universe);
            info!(
                day = d,
                mu = row.mu.to_f64(),
                sampled = outcome.exploration.executed.len(),
                deployed = pipeline.deployed_tests().len(),
                "day complete"
            );
            coverage.push(row);
            days.push(summarize_day(outcome, production, &self.violations));
        }
        let funnel = phase_funnel(&pipeline.ledger);
        Ok(CampaignRun {
            pipeline,
            report: CampaignReport { coverage, funnel, days },
        })
    }

    /// Daily coverage of a fixed hand-written suite made of the `size` most
    /// frequent distinct keys in the first day of production logs.
    pub fn manual_suite_coverage(&self, size: usize) -> Vec<CoverageRow<F>> {
        let mut production = crate::log_model::ProductionLogStore::new();
        let mut suite: Vec<TestKey> = Vec::new();
        let mut rows = Vec::new();
        for d in 0..self.config.pipeline.horizon_days {
            let t = Datestamp(d);
            production.extend(self.production_day(t));
            if d == 0 {
                suite = most_frequent_keys(production.day(t).map(|x| x.key()), size);
            }
            let entries: Vec<WWLogEntry> = suite
                .iter()
                .map(|k| WWLogEntry {
                    key: k.clone(),
                    day: t,
                    passed: true,
                })
                .collect();
            let refs: Vec<&WWLogEntry> = entries.iter().collect();
            let universe = CoverageBase::from_production(&production, t, &self.violations);
            rows.push(coverage_row(t, &refs, &self.violations, &universe));
        }
        rows
    }
}

fn most_frequent_keys<'a>(keys: impl Iterator<Item = &'a TestKey>, n: usize) -> Vec<TestKey> {
    let mut counts: std::collections::BTreeMap<&TestKey, usize> = Default::default();
    for k in keys {
        *counts.entry(k).or_default() += 1;
    }
    let mut v: Vec<_> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    v.into_iter().take(n).map(|(k, _)| k.clone()).collect()
}

fn summarize_day<F: Real>(o: DayOutcome<F>, production: usize, v: &ViolationMap) -> DaySummary<F> {
    let samples = o
        .exploration
        .executed
        .into_iter()
        .map(|e| {
            let c = e.candidate;
            SampleRow {
                round: e.round,
                violation_type: v.violation_type(c.datapoint.r()).to_owned(),
                key: c.datapoint.key().clone(),
                phi1: c.phi1,
                phi2: c.phi2,
                phi3: c.phi3,
                phi: c.phi,
                passed: e.passed,
            }
        })
        .collect();
    DaySummary {
        day: o.day,
        production,
        k: o.exploration.model.as_ref().map(|m| m.k()),
        cluster_cost: o.exploration.model.as_ref().map(|m| m.cost()),
        samples,
        staged: o.staged.len(),
        staging_runs: o.staging_runs,
        promoted: o.promotion.promoted.into_iter().map(|t| t.key).collect(),
        suite: o.suite,
    }
}

/// Create `out/tests`, clearing test files left by an earlier run.
fn prepare_tests_dir(out: &Path) -> Result<PathBuf> {
    let dir = out.join("tests");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let p = entry.map_err(|e| Error::io(&dir, e))?.path();
        if p.extension().is_some_and(|x| x == "json") {
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(dir)
}

fn quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

pub fn samples_csv<F: Real>(days: &[DaySummary<F>]) -> String {
    let mut s = String::from("day,round,key_hash,content_type,violation_type,decision,actions,phi1,phi2,phi3,phi,passed\n");
    for d in days {
        for r in &d.samples {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                d.day.0,
                r.round,
                r.key.stable_hash(),
                quote(r.key.content_type()),
                quote(&r.violation_type),
                quote(r.key.decision()),
                quote(&r.key.actions().join("+")),
                fmt_real(r.phi1),
                fmt_real(r.phi2),
                fmt_real(r.phi3),
                fmt_real(r.phi),
                r.passed
            );
        }
    }
    s
}

pub fn daily_csv<F: Real>(days: &[DaySummary<F>]) -> String {
    let mut s = String::from("day,production,k,cluster_cost,sampled,staged,staging_runs,promoted,deployed_runs,suite_failures\n");
    for d in days {
        let opt = |x: Option<usize>| x.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            d.day.0,
            d.production,
            opt(d.k),
            opt(d.cluster_cost),
            d.samples.len(),
            d.staged,
            d.staging_runs,
            d.promoted.len(),
            d.suite.results.len(),
            d.suite.failures.len()
        );
    }
    s
}

pub fn failures_csv<F: Real>(days: &[DaySummary<F>]) -> String {
    let mut s = String::from("day,key_hash,key,trace\n");
    for d in days {
        for f in &d.suite.failures {
            let _ = writeln!(s, "{},{},{},{}", d.day.0, f.key.stable_hash(), quote(&f.key.to_string()), quote(&f.trace));
        }
    }
    s
}

fn write(dir: &Path, name: &str, content: &str) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, content).map_err(|e| Error::io(&p, e))
}

/// Write every report of a finished campaign into `out`.
pub fn write_reports<F: Real>(run: &CampaignRun<F>, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let r = &run.report;
    write(out, "coverage.csv", &coverage_csv(&r.coverage))?;
    write(out, "funnel.csv", &funnel_csv(&r.funnel))?;
    for phase in [Phase::Exploration, Phase::Staging, Phase::Deployed] {
        let name = format!("distribution_{}.csv", phase.as_str());
        write(out, &name, &distribution_csv(&distribution_report(phase, &run.pipeline.ledger)))?;
    }
    write(out, "samples.csv", &samples_csv(&r.days))?;
    write(out, "daily.csv", &daily_csv(&r.days))?;
    write(out, "failures.csv", &failures_csv(&r.days))?;
    run.pipeline.ledger.save(&out.join("ledger.json"))
}

/// Prepare, run and write a campaign into `out`.
pub fn run_campaign<F: Real>(config: CampaignConfig<F>, out: &Path) -> Result<CampaignRun<F>> {
    let campaign = Campaign::prepare(config)?;
    let run = campaign.run(Some(out))?;
    write_reports(&run, out)?;
    Ok(run)
}
