use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::log_model::{canonical_actions, canonical_tags, Datestamp};
use crate::seeds;

/// (content type, canonical report tags, decision).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RuleKey {
    pub content_type: String,
    pub report_tags: Vec<String>,
    pub decision: String,
}

impl RuleKey {
    pub fn new<S: AsRef<str>>(content_type: &str, report_tags: &[S], decision: &str) -> Self {
        RuleKey {
            content_type: content_type.trim().to_owned(),
            report_tags: canonical_tags(report_tags),
            decision: decision.trim().to_owned(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RuleRecord {
    content_type: String,
    report_tags: Vec<String>,
    decision: String,
    actions: Vec<String>,
}

/// The "correct" enforcement outcome for every (content, tags, decision).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RuleTable {
    rules: BTreeMap<RuleKey, Vec<String>>,
}

impl RuleTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<S: AsRef<str>>(&mut self, key: RuleKey, actions: &[S]) {
        self.rules.insert(key, canonical_actions(actions));
    }

    pub fn with<S: AsRef<str>, T: AsRef<str>>(
        mut self,
        content_type: &str,
        report_tags: &[S],
        decision: &str,
        actions: &[T],
    ) -> Self {
        self.insert(RuleKey::new(content_type, report_tags, decision), actions);
        self
    }

    pub fn lookup(&self, key: &RuleKey) -> Option<&[String]> {
        self.rules.get(key).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&RuleKey, &[String])> + '_ {
        self.rules.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn content_types(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.rules.keys().map(|k| k.content_type.as_str()).collect();
        v.dedup();
        v
    }

    pub fn has_content_type(&self, c: &str) -> bool {
        self.rules.keys().any(|k| k.content_type == c)
    }

    /// Rules for one content type in key order.
    pub fn rules_for(&self, c: &str) -> Vec<(&RuleKey, &[String])> {
        self.iter().filter(|(k, _)| k.content_type == c).collect()
    }

    /// The table as production would apply it on `day`, with every action
    /// fault active by then folded in.
    pub fn with_faults(&self, faults: &FaultPlan, day: Datestamp) -> RuleTable {
        let mut out = self.clone();
        for f in faults.active(day) {
            if let Some(actions) = out.rules.get_mut(&f.key) {
                match &f.effect {
                    FaultEffect::MutateActions(a) => *actions = a.clone(),
                    FaultEffect::SuppressActions => actions.clear(),
                    FaultEffect::DropReviewJob | FaultEffect::DelayReviewJob(_) => {}
                }
            }
        }
        out
    }

    pub fn from_json_str(s: &str) -> serde_json::Result<Self> {
        let records: Vec<RuleRecord> = serde_json::from_str(s)?;
        let mut t = RuleTable::new();
        for r in records {
            t.insert(RuleKey::new(&r.content_type, &r.report_tags, &r.decision), &r.actions);
        }
        Ok(t)
    }

    pub fn to_json_string(&self) -> String {
        let records: Vec<RuleRecord> = self
            .rules
            .iter()
            .map(|(k, a)| RuleRecord {
                content_type: k.content_type.clone(),
                report_tags: k.report_tags.clone(),
                decision: k.decision.clone(),
                actions: a.clone(),
            })
            .collect();
        serde_json::to_string_pretty(&records).expect("rules serialize")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&s).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviationMode {
    /// Remove one executed action.
    #[default]
    Drop,
    /// Replace one executed action with a different label.
    Substitute,
}

/// Label added when a deviation hits an empty action list.
pub const SPURIOUS_ACTION: &str = "Warn";

/// Perturb `actions` so that the resulting multiset always differs.
pub fn deviate<R: Rng>(actions: &[String], mode: DeviationMode, substitutes: &[String], rng: &mut R) -> Vec<String> {
    let mut out = actions.to_vec();
    if out.is_empty() {
        out.push(substitutes.first().cloned().unwrap_or_else(|| SPURIOUS_ACTION.to_owned()));
        return out;
    }
    let i = rng.gen_range(0..out.len());
    match mode {
        DeviationMode::Drop => {
            out.remove(i);
        }
        DeviationMode::Substitute => {
            let choices: Vec<&String> = substitutes.iter().filter(|s| **s != out[i]).collect();
            if choices.is_empty() {
                let fallback = if out[i] == SPURIOUS_ACTION { "Noop" } else { SPURIOUS_ACTION };
                out[i] = fallback.to_owned();
            } else {
                out[i] = choices[rng.gen_range(0..choices.len())].clone();
            }
        }
    }
    canonical_actions(&out)
}

/// Per-rule probability that one execution deviates from the rule table.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseModel {
    pub default_p_flake: f64,
    pub per_rule: BTreeMap<RuleKey, f64>,
    pub mode: DeviationMode,
    pub substitutes: Vec<String>,
}

/// Two-component mixture for per-rule flake probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BimodalNoise {
    /// Fraction of rules drawn from `flaky_range`.
    pub flaky_fraction: f64,
    pub flaky_range: (f64, f64),
    pub stable_range: (f64, f64),
}

impl Default for BimodalNoise {
    fn default() -> Self {
        BimodalNoise {
            flaky_fraction: 0.8,
            flaky_range: (0.3, 0.9),
            stable_range: (0.0, 0.02),
        }
    }
}

impl NoiseModel {
    pub fn off() -> Self {
        Self::default()
    }

    pub fn uniform(p_flake: f64) -> Self {
        NoiseModel {
            default_p_flake: p_flake,
            ..Self::default()
        }
    }

    /// Draw an independent flake probability for every rule in `rules`.
    pub fn bimodal(rules: &RuleTable, mix: BimodalNoise, seed: u64) -> Self {
        let mut rng = seeds::rng(seed, "noise-mixture", &[]);
        let per_rule = rules
            .iter()
            .map(|(k, _)| {
                let (lo, hi) = if rng.gen_bool(mix.flaky_fraction.clamp(0.0, 1.0)) {
                    mix.flaky_range
                } else {
                    mix.stable_range
                };
                let p = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
                (k.clone(), p)
            })
            .collect();
        NoiseModel {
            default_p_flake: 0.0,
            per_rule,
            ..Self::default()
        }
    }

    pub fn p_flake(&self, key: &RuleKey) -> f64 {
        self.per_rule.get(key).copied().unwrap_or(self.default_p_flake)
    }

    pub fn apply<R: Rng>(&self, key: &RuleKey, actions: &[String], rng: &mut R) -> Vec<String> {
        let p = self.p_flake(key).clamp(0.0, 1.0);
        // Always draw so the stream position does not depend on p.
        let u: f64 = rng.gen();
        if u < p {
            deviate(actions, self.mode, &self.substitutes, rng)
        } else {
            actions.to_vec()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultEffect {
    /// Executed actions replaced by this list.
    MutateActions(Vec<String>),
    /// No actions executed.
    SuppressActions,
    /// Reports never create a review job.
    DropReviewJob,
    /// Review-job creation delayed by this many simulation steps.
    DelayReviewJob(u64),
}

/// A scheduled change to platform behavior, active from `day` onwards.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultInjection {
    pub day: Datestamp,
    pub key: RuleKey,
    pub effect: FaultEffect,
}

impl FaultInjection {
    pub fn is_active(&self, day: Datestamp) -> bool {
        day >= self.day
    }

    /// Review-path faults match on content type and tags only; the decision
    /// is not known when the job is created.
    pub fn matches_report(&self, content_type: &str, tags: &[String]) -> bool {
        self.key.content_type == content_type && self.key.report_tags == tags
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FaultRecord {
    day: u32,
    content_type: String,
    report_tags: Vec<String>,
    decision: String,
    mutated_actions: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    drop_review_job: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    review_delay_steps: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FaultPlan {
    faults: Vec<FaultInjection>,
}

impl FaultPlan {
    pub fn new(faults: Vec<FaultInjection>) -> Self {
        FaultPlan { faults }
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn push(&mut self, f: FaultInjection) {
        self.faults.push(f);
    }

    pub fn all(&self) -> &[FaultInjection] {
        &self.faults
    }

    pub fn active(&self, day: Datestamp) -> impl Iterator<Item = &FaultInjection> + '_ {
        self.faults.iter().filter(move |f| f.is_active(day))
    }

    pub fn from_json_str(s: &str) -> serde_json::Result<Self> {
        let records: Vec<FaultRecord> = serde_json::from_str(s)?;
        let faults = records
            .into_iter()
            .map(|r| {
                let effect = if r.drop_review_job {
                    FaultEffect::DropReviewJob
                } else if let Some(n) = r.review_delay_steps {
                    FaultEffect::DelayReviewJob(n)
                } else {
                    match r.mutated_actions {
                        Some(a) => FaultEffect::MutateActions(canonical_actions(&a)),
                        None => FaultEffect::SuppressActions,
                    }
                };
                FaultInjection {
                    day: Datestamp(r.day),
                    key: RuleKey::new(&r.content_type, &r.report_tags, &r.decision),
                    effect,
                }
            })
            .collect();
        Ok(FaultPlan { faults })
    }

    pub fn to_json_string(&self) -> String {
        let records: Vec<FaultRecord> = self
            .faults
            .iter()
            .map(|f| {
                let mut r = FaultRecord {
                    day: f.day.0,
                    content_type: f.key.content_type.clone(),
                    report_tags: f.key.report_tags.clone(),
                    decision: f.key.decision.clone(),
                    mutated_actions: None,
                    drop_review_job: false,
                    review_delay_steps: None,
                };
                match &f.effect {
                    FaultEffect::MutateActions(a) => r.mutated_actions = Some(a.clone()),
                    FaultEffect::SuppressActions => {}
                    FaultEffect::DropReviewJob => r.drop_review_job = true,
                    FaultEffect::DelayReviewJob(n) => r.review_delay_steps = Some(*n),
                }
                r
            })
            .collect();
        serde_json::to_string_pretty(&records).expect("faults serialize")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&s).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn rule_file_round_trip() {
        let json = r#"[{"content_type":"LiveVideo","report_tags":["unauthorized sales"],"decision":"delete","actions":["Delete"]}]"#;
        let t = RuleTable::from_json_str(json).unwrap();
        assert_eq!(
            t.lookup(&RuleKey::new("LiveVideo", &["unauthorized sales"], "delete")),
            Some(&["Delete".to_string()][..])
        );
        assert_eq!(RuleTable::from_json_str(&t.to_json_string()).unwrap(), t);
    }

    #[test]
    fn fault_file_parses_null_as_suppression() {
        let json = r#"[
            {"day": 15, "content_type": "Photo", "report_tags": ["spam"], "decision": "delete", "mutated_actions": null},
            {"day": 3, "content_type": "Photo", "report_tags": ["spam"], "decision": "delete", "mutated_actions": ["Warn"]},
            {"day": 4, "content_type": "Photo", "report_tags": ["spam"], "decision": "delete", "mutated_actions": null, "drop_review_job": true}
        ]"#;
        let plan = FaultPlan::from_json_str(json).unwrap();
        assert_eq!(plan.all()[0].effect, FaultEffect::SuppressActions);
        assert_eq!(plan.all()[1].effect, FaultEffect::MutateActions(strings(&["Warn"])));
        assert_eq!(plan.all()[2].effect, FaultEffect::DropReviewJob);
        assert_eq!(plan.active(Datestamp(3)).count(), 1);
        assert_eq!(plan.active(Datestamp(15)).count(), 3);
        assert_eq!(FaultPlan::from_json_str(&plan.to_json_string()).unwrap(), plan);
    }

    #[test]
    fn faults_fold_into_rule_table_from_activation_day() {
        let rules = RuleTable::new().with("Photo", &["spam"], "delete", &["Delete"]);
        let key = RuleKey::new("Photo", &["spam"], "delete");
        let plan = FaultPlan::new(vec![FaultInjection {
            day: Datestamp(5),
            key: key.clone(),
            effect: FaultEffect::SuppressActions,
        }]);
        assert_eq!(rules.with_faults(&plan, Datestamp(4)), rules);
        assert_eq!(rules.with_faults(&plan, Datestamp(5)).lookup(&key), Some(&[][..]));
    }

    #[test]
    fn deviation_always_changes_the_multiset() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let subs = strings(&["Delete", "Warn"]);
        for actions in [strings(&[]), strings(&["Delete"]), strings(&["Checkpoint", "Delete"])] {
            for mode in [DeviationMode::Drop, DeviationMode::Substitute] {
                for _ in 0..50 {
                    let out = deviate(&actions, mode, &subs, &mut rng);
                    assert_ne!(canonical_actions(&out), canonical_actions(&actions));
                }
            }
        }
        let out = deviate(&strings(&["Warn"]), DeviationMode::Substitute, &strings(&["Warn"]), &mut rng);
        assert_ne!(out, strings(&["Warn"]));
    }

    #[test]
    fn zero_noise_never_deviates() {
        let key = RuleKey::new("Photo", &["spam"], "delete");
        let noise = NoiseModel::off();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = strings(&["Delete"]);
        assert!((0..1000).all(|_| noise.apply(&key, &a, &mut rng) == a));
        let always = NoiseModel::uniform(1.0);
        assert!((0..100).all(|_| always.apply(&key, &a, &mut rng) != a));
    }

    #[test]
    fn bimodal_mixture_ranges() {
        let mut rules = RuleTable::new();
        for i in 0..500 {
            rules = rules.with("Photo", &[format!("tag{i}")], "delete", &["Delete"]);
        }
        let noise = NoiseModel::bimodal(&rules, BimodalNoise::default(), 11);
        let ps: Vec<f64> = rules.iter().map(|(k, _)| noise.p_flake(k)).collect();
        assert!(ps.iter().all(|&p| (0.0..=0.02).contains(&p) || (0.3..=0.9).contains(&p)));
        let flaky = ps.iter().filter(|&&p| p >= 0.3).count() as f64 / ps.len() as f64;
        // binomial(500, 0.8): sd ~ 0.018
        assert!((flaky - 0.8).abs() < 0.09, "flaky fraction {flaky}");
        assert_eq!(NoiseModel::bimodal(&rules, BimodalNoise::default(), 11), noise);
    }
}
