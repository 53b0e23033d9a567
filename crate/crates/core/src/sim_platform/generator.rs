use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::rules::{deviate, DeviationMode, RuleKey, RuleTable};
use crate::log_model::{Datapoint, Datestamp, TestKey, ViolationMap};
use crate::seeds;

/// Synthetic production-log generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Content types in popularity rank order. Empty means every content
    /// type of the rule table, in table order.
    pub content_types: Vec<String>,
    /// Rank-frequency exponent for content types; 0 is uniform.
    pub content_exponent: f64,
    /// Rank-frequency exponent over the rules of one content type.
    pub rule_exponent: f64,
    pub datapoints_per_day: usize,
    /// Fraction of datapoints whose logged actions deviate from the rules.
    pub anomaly_fraction: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            content_types: Vec::new(),
            content_exponent: 1.0,
            rule_exponent: 1.0,
            datapoints_per_day: 500,
            anomaly_fraction: 0.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.content_exponent >= 0.0) {
            errs.push(format!("generator.content_exponent must be >= 0 (got {})", self.content_exponent));
        }
        if !(self.rule_exponent >= 0.0) {
            errs.push(format!("generator.rule_exponent must be >= 0 (got {})", self.rule_exponent));
        }
        if !(0.0..=1.0).contains(&self.anomaly_fraction) {
            errs.push(format!("generator.anomaly_fraction must be in [0, 1] (got {})", self.anomaly_fraction));
        }
        errs
    }
}

fn zipf_weights(n: usize, exponent: f64) -> Vec<f64> {
    (1..=n).map(|rank| (rank as f64).powf(-exponent)).collect()
}

/// Generate one day of production datapoints from `rules`.
///
/// Content types are drawn by rank frequency; within a content type, rules
/// are drawn by rank frequency over table order. Each datapoint logs the
/// rule outcome unless it falls in the anomaly fraction.
pub fn generate_production_logs(cfg: &GeneratorConfig, rules: &RuleTable, t: Datestamp) -> Vec<Datapoint> {
    if cfg.datapoints_per_day == 0 || rules.is_empty() {
        return Vec::new();
    }
    let ranked: Vec<&str> = if cfg.content_types.is_empty() {
        rules.content_types()
    } else {
        cfg.content_types.iter().map(String::as_str).collect()
    };
    let per_content: Vec<Vec<(&RuleKey, &[String])>> = ranked.iter().map(|c| rules.rules_for(c)).collect();
    let mut weights = zipf_weights(ranked.len(), cfg.content_exponent);
    for (w, rs) in weights.iter_mut().zip(&per_content) {
        if rs.is_empty() {
            *w = 0.0;
        }
    }
    let Ok(content_dist) = WeightedIndex::new(&weights) else {
        return Vec::new();
    };
    let rule_dists: Vec<Option<WeightedIndex<f64>>> = per_content
        .iter()
        .map(|rs| WeightedIndex::new(zipf_weights(rs.len(), cfg.rule_exponent)).ok())
        .collect();

    let mut rng = seeds::rng(cfg.seed, "production", &[u64::from(t.0)]);
    let substitutes: Vec<String> = ["Checkpoint", "Delete", "Restrict", "Warn"].map(String::from).to_vec();
    (0..cfg.datapoints_per_day)
        .map(|_| {
            let ci = content_dist.sample(&mut rng);
            let rs = &per_content[ci];
            let (key, actions) = rs[rule_dists[ci].as_ref().expect("non-empty").sample(&mut rng)];
            let anomalous = rng.gen::<f64>() < cfg.anomaly_fraction;
            let actions = if anomalous {
                deviate(actions, DeviationMode::Substitute, &substitutes, &mut rng)
            } else {
                actions.to_vec()
            };
            let key = TestKey::new(&key.content_type, &key.report_tags, &key.decision, &actions)
                .expect("rule keys are canonical and non-empty");
            Datapoint::new(t, key)
        })
        .collect()
}

/// Parameters for synthesizing a rule table and violation map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UniverseSpec {
    pub content_types: usize,
    pub violation_types: usize,
    pub tags_per_violation: usize,
    /// Decisions per (content, tag) rule family, at most 4.
    pub decisions: usize,
    /// Probability that a (content, violation) pair has rules at all.
    pub pair_density: f64,
    pub seed: u64,
}

impl Default for UniverseSpec {
    fn default() -> Self {
        UniverseSpec {
            content_types: 8,
            violation_types: 12,
            tags_per_violation: 1,
            decisions: 2,
            pair_density: 0.7,
            seed: 0,
        }
    }
}

const CONTENT_NAMES: [&str; 12] = [
    "Photo",
    "StatusUpdate",
    "Video",
    "Comment",
    "LiveVideo",
    "Story",
    "Reel",
    "GroupPost",
    "Event",
    "Listing",
    "Profile",
    "Message",
];

const DECISIONS: [(&str, &[&str]); 4] = [
    ("delete", &["Delete"]),
    ("ignore", &[]),
    ("delete and checkpoint", &["Checkpoint", "Delete"]),
    ("restrict", &["Restrict"]),
];

pub struct Universe {
    pub rules: RuleTable,
    pub violations: ViolationMap,
    /// Content types in rank order.
    pub content_types: Vec<String>,
}

impl UniverseSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("content_types", self.content_types),
            ("violation_types", self.violation_types),
            ("tags_per_violation", self.tags_per_violation),
            ("decisions", self.decisions),
        ] {
            if v == 0 {
                errs.push(format!("universe.{name} must be >= 1"));
            }
        }
        if self.decisions > DECISIONS.len() {
            errs.push(format!("universe.decisions must be <= {}", DECISIONS.len()));
        }
        if !(self.pair_density > 0.0 && self.pair_density <= 1.0) {
            errs.push(format!("universe.pair_density must be in (0, 1] (got {})", self.pair_density));
        }
        errs
    }

    pub fn content_name(i: usize) -> String {
        CONTENT_NAMES
            .get(i)
            .map(|s| s.to_string())
            .unwrap_or_else(|| format!("Content{i:02}"))
    }

    pub fn build(&self) -> Universe {
        let mut rng = seeds::rng(self.seed, "universe", &[]);
        let content_types: Vec<String> = (0..self.content_types).map(Self::content_name).collect();
        let mut violations = ViolationMap::default();
        let tags: Vec<Vec<String>> = (0..self.violation_types)
            .map(|v| {
                let label = format!("V{v:02}");
                (0..self.tags_per_violation)
                    .map(|i| {
                        let tag = format!("v{v:02}-t{i}");
                        violations.insert(&[&tag], label.clone());
                        tag
                    })
                    .collect()
            })
            .collect();
        let mut rules = RuleTable::new();
        let decisions = &DECISIONS[..self.decisions.min(DECISIONS.len())];
        for c in &content_types {
            let mut pairs: Vec<usize> = (0..self.violation_types)
                .filter(|_| rng.gen::<f64>() < self.pair_density)
                .collect();
            if pairs.is_empty() {
                pairs.push(*(0..self.violation_types).collect::<Vec<_>>().choose(&mut rng).expect("non-empty"));
            }
            for v in pairs {
                for tag in &tags[v] {
                    for (d, a) in decisions {
                        rules.insert(RuleKey::new(c, &[tag], d), a);
                    }
                }
            }
        }
        Universe {
            rules,
            violations,
            content_types,
        }
    }
}
