//! Exploration scores and top-N sampling.
//!
//! * `phi1`: rarity of the candidate's violation type among today's runs.
//! * `phi2`: rarity of its (content, violation) cluster among today's runs.
//! * `phi3`: 1 when the previous day logged the same stimuli with a
//!   different action outcome.
//!
//! The combined score is a convex combination of the three.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::clustering::{CategoricalPoint, ClusterModel};
use crate::error::{Error, Result};
use crate::log_model::{Datapoint, TestKey, ViolationMap, WWLogEntry};
use crate::scalar::Real;
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights<F> {
    pub alpha: F,
    pub beta: F,
    pub gamma: F,
}

impl<F: Real> ScoreWeights<F> {
    pub fn new(alpha: F, beta: F, gamma: F) -> Result<Self> {
        let w = ScoreWeights { alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn equal() -> Self {
        let third = F::one() / F::lit(3.0);
        ScoreWeights {
            alpha: third,
            beta: third,
            gamma: third,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.alpha, self.beta, self.gamma]
            .iter()
            .all(|w| w.is_finite() && *w >= F::zero())
            && (self.alpha + self.beta + self.gamma - F::one()).abs() <= F::weight_tolerance();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidWeights {
                alpha: self.alpha.to_f64().unwrap_or(f64::NAN),
                beta: self.beta.to_f64().unwrap_or(f64::NAN),
                gamma: self.gamma.to_f64().unwrap_or(f64::NAN),
            })
        }
    }

    pub fn combine(&self, phi1: F, phi2: F, phi3: F) -> F {
        self.alpha * phi1 + self.beta * phi2 + self.gamma * phi3
    }
}

impl<F: Real> Default for ScoreWeights<F> {
    fn default() -> Self {
        Self::equal()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate<F> {
    pub datapoint: Datapoint,
    pub phi1: F,
    pub phi2: F,
    pub phi3: F,
    pub phi: F,
}

/// `1 - count / max`; 1 when the day is empty or the bucket unseen.
fn rarity<F: Real>(count: usize, max: usize) -> F {
    if max == 0 {
        F::one()
    } else {
        F::one() - F::from_ratio(count, max)
    }
}

pub fn pair_of(key: &TestKey, v: &ViolationMap) -> CategoricalPoint {
    CategoricalPoint::new(key.content_type(), v.violation_type(key.report_tags()))
}

pub fn score_phi1<F: Real>(x: &Datapoint, ww_day: &[&WWLogEntry], v: &ViolationMap) -> F {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for e in ww_day {
        *counts.entry(v.violation_type(e.key.report_tags())).or_default() += 1;
    }
    let max = counts.values().copied().max().unwrap_or(0);
    let own = counts.get(v.violation_type(x.r())).copied().unwrap_or(0);
    rarity(own, max)
}

pub fn score_phi2<F: Real>(x: &Datapoint, ww_day: &[&WWLogEntry], model: &ClusterModel, v: &ViolationMap) -> F {
    let mut counts = vec![0usize; model.k()];
    for e in ww_day {
        counts[model.assign(&pair_of(&e.key, v))] += 1;
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    rarity(counts[model.assign(&pair_of(x.key(), v))], max)
}

/// `previous_day` holds the keys logged on day `x.t - 1` in the configured
/// source store. Day 0 has no previous day and scores 0.
pub fn score_phi3<'a, F: Real>(x: &Datapoint, previous_day: impl IntoIterator<Item = &'a TestKey>) -> F {
    if x.t().prev().is_none() {
        return F::zero();
    }
    let fires = previous_day
        .into_iter()
        .any(|k| k.same_stimuli(x.key()) && k.actions() != x.a());
    if fires {
        F::one()
    } else {
        F::zero()
    }
}

/// Precomputed day counts so that a whole candidate pool can be scored
/// against one snapshot of the WW day slice.
pub struct ScoringContext<'a> {
    violations: &'a ViolationMap,
    model: &'a ClusterModel,
    by_violation: HashMap<String, usize>,
    max_violation: usize,
    by_cluster: Vec<usize>,
    max_cluster: usize,
    previous: HashMap<(&'a str, &'a [String], &'a str), BTreeSet<&'a [String]>>,
}

impl<'a> ScoringContext<'a> {
    pub fn new(
        ww_day: &[&WWLogEntry],
        violations: &'a ViolationMap,
        model: &'a ClusterModel,
        previous_day: impl IntoIterator<Item = &'a TestKey>,
    ) -> Self {
        let mut by_violation: HashMap<String, usize> = HashMap::new();
        let mut by_cluster = vec![0usize; model.k()];
        for e in ww_day {
            *by_violation
                .entry(violations.violation_type(e.key.report_tags()).to_owned())
                .or_default() += 1;
            by_cluster[model.assign(&pair_of(&e.key, violations))] += 1;
        }
        let mut previous: HashMap<_, BTreeSet<&[String]>> = HashMap::new();
        for k in previous_day {
            previous
                .entry((k.content_type(), k.report_tags(), k.decision()))
                .or_default()
                .insert(k.actions());
        }
        ScoringContext {
            violations,
            model,
            max_violation: by_violation.values().copied().max().unwrap_or(0),
            by_violation,
            max_cluster: by_cluster.iter().copied().max().unwrap_or(0),
            by_cluster,
            previous,
        }
    }

    pub fn phi1<F: Real>(&self, x: &Datapoint) -> F {
        let own = self.by_violation.get(self.violations.violation_type(x.r())).copied().unwrap_or(0);
        rarity(own, self.max_violation)
    }

    pub fn phi2<F: Real>(&self, x: &Datapoint) -> F {
        let j = self.model.assign(&pair_of(x.key(), self.violations));
        rarity(self.by_cluster[j], self.max_cluster)
    }

    pub fn phi3<F: Real>(&self, x: &Datapoint) -> F {
        if x.t().prev().is_none() {
            return F::zero();
        }
        let fires = self
            .previous
            .get(&(x.c(), x.r(), x.d()))
            .is_some_and(|seen| seen.iter().any(|a| *a != x.a()));
        if fires {
            F::one()
        } else {
            F::zero()
        }
    }

    pub fn score<F: Real>(&self, x: &Datapoint, weights: &ScoreWeights<F>) -> ScoredCandidate<F> {
        let (phi1, phi2, phi3) = (self.phi1(x), self.phi2(x), self.phi3(x));
        ScoredCandidate {
            datapoint: x.clone(),
            phi1,
            phi2,
            phi3,
            phi: weights.combine(phi1, phi2, phi3),
        }
    }
}

/// Score one datapoint. Rejects invalid weights.
pub fn score_combined<F: Real>(
    x: &Datapoint,
    weights: &ScoreWeights<F>,
    inputs: &ScoringContext<'_>,
) -> Result<ScoredCandidate<F>> {
    weights.validate()?;
    Ok(inputs.score(x, weights))
}

fn by_phi_desc<F: Real>(a: &ScoredCandidate<F>, b: &ScoredCandidate<F>) -> Ordering {
    b.phi.partial_cmp(&a.phi).unwrap_or(Ordering::Equal)
}

/// Keep the `n` highest-scoring candidates not in `exclude`. Candidates tied
/// at the cut-off score are subsampled uniformly at random under `seed`.
pub fn sample_top_n<F: Real>(
    candidates: Vec<ScoredCandidate<F>>,
    n: usize,
    seed: u64,
    exclude: &BTreeSet<TestKey>,
) -> Vec<ScoredCandidate<F>> {
    let mut pool: Vec<ScoredCandidate<F>> = candidates
        .into_iter()
        .filter(|c| !exclude.contains(c.datapoint.key()))
        .collect();
    if n >= pool.len() {
        pool.sort_by(by_phi_desc);
        return pool;
    }
    if n == 0 {
        return Vec::new();
    }
    pool.sort_by(by_phi_desc);
    let cutoff = pool[n - 1].phi;
    let above = pool.iter().take_while(|c| c.phi > cutoff).count();
    let tied_end = above + pool[above..].iter().take_while(|c| c.phi == cutoff).count();
    let mut tied: Vec<ScoredCandidate<F>> = pool.drain(above..tied_end).collect();
    pool.truncate(above);
    let mut rng = seeds::rng(seed, "top-n-ties", &[]);
    let (chosen, _) = tied.partial_shuffle(&mut rng, n - above);
    pool.extend_from_slice(chosen);
    pool
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::log_model::{canonicalize, Datestamp, RawDatapoint};

    fn dp(day: u32, c: &str, r: &str, d: &str, a: &[&str]) -> Datapoint {
        canonicalize(&RawDatapoint::new(day, c, &[r], d, a)).unwrap()
    }

    fn entries(spec: &[(&str, &str, usize)]) -> Vec<WWLogEntry> {
        spec.iter()
            .flat_map(|&(c, r, n)| {
                std::iter::repeat_n(
                    WWLogEntry {
                        key: dp(1, c, r, "delete", &["Delete"]).key().clone(),
                        day: Datestamp(1),
                        passed: true,
                    },
                    n,
                )
            })
            .collect()
    }

    fn vmap() -> ViolationMap {
        ViolationMap::default().with(&["a"], "vA").with(&["b"], "vB").with(&["c"], "vC")
    }

    #[test]
    fn phi1_direct_evaluation() {
        let es = entries(&[("Photo", "a", 3), ("Photo", "b", 1)]);
        let day: Vec<&WWLogEntry> = es.iter().collect();
        let v = vmap();
        let x_b = dp(1, "Video", "b", "delete", &[]);
        let x_a = dp(1, "Video", "a", "delete", &[]);
        let x_c = dp(1, "Video", "c", "delete", &[]);
        let phi: f64 = score_phi1(&x_b, &day, &v);
        assert!((phi - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(score_phi1::<f64>(&x_a, &day, &v), 0.0);
        assert_eq!(score_phi1::<f64>(&x_c, &day, &v), 1.0);
        assert_eq!(score_phi1::<f64>(&x_a, &[], &v), 1.0);
    }

    #[test]
    fn phi2_direct_evaluation() {
        let model = ClusterModel::from_centers(vec![
            CategoricalPoint::new("Photo", "vA"),
            CategoricalPoint::new("Video", "vB"),
        ]);
        let es = entries(&[("Photo", "a", 4), ("Video", "b", 1)]);
        let day: Vec<&WWLogEntry> = es.iter().collect();
        let v = vmap();
        let in_cl1 = dp(1, "Video", "b", "ignore", &[]);
        let in_cl0 = dp(1, "Photo", "a", "ignore", &[]);
        assert_eq!(model.assign(&pair_of(in_cl1.key(), &v)), 1);
        assert!((score_phi2::<f64>(&in_cl1, &day, &model, &v) - 0.75).abs() < 1e-12);
        assert_eq!(score_phi2::<f64>(&in_cl0, &day, &model, &v), 0.0);
        assert_eq!(score_phi2::<f64>(&in_cl0, &[], &model, &v), 1.0);
    }

    #[test]
    fn phi3_indicator() {
        let prev = [dp(4, "Photo", "a", "delete", &["Delete"]).key().clone()];
        let changed = dp(5, "Photo", "a", "delete", &["Delete", "Checkpoint"]);
        let same = dp(5, "Photo", "a", "delete", &["Delete"]);
        assert_eq!(score_phi3::<f64>(&changed, &prev), 1.0);
        assert_eq!(score_phi3::<f64>(&same, &prev), 0.0);
        let day0 = dp(0, "Photo", "a", "delete", &["Delete", "Checkpoint"]);
        assert_eq!(score_phi3::<f64>(&day0, &prev), 0.0);
    }

    #[test]
    fn context_agrees_with_free_functions() {
        let model = ClusterModel::from_centers(vec![
            CategoricalPoint::new("Photo", "vA"),
            CategoricalPoint::new("Video", "vB"),
        ]);
        let es = entries(&[("Photo", "a", 2), ("Video", "b", 5), ("Photo", "c", 1)]);
        let day: Vec<&WWLogEntry> = es.iter().collect();
        let v = vmap();
        let prev_keys = [dp(2, "Photo", "a", "delete", &[]).key().clone()];
        let ctx = ScoringContext::new(&day, &v, &model, &prev_keys);
        for x in [
            dp(3, "Photo", "a", "delete", &["Delete"]),
            dp(3, "Video", "c", "ignore", &[]),
            dp(3, "Photo", "b", "delete", &[]),
        ] {
            assert_eq!(ctx.phi1::<f64>(&x), score_phi1::<f64>(&x, &day, &v));
            assert_eq!(ctx.phi2::<f64>(&x), score_phi2::<f64>(&x, &day, &model, &v));
            assert_eq!(ctx.phi3::<f64>(&x), score_phi3::<f64>(&x, &prev_keys));
        }
    }

    #[test]
    fn weights() {
        let w = ScoreWeights::<f64>::equal();
        assert!((w.combine(0.6, 0.3, 1.0) - 0.633_333_333_333_333_3).abs() < 1e-9);
        assert!((w.combine(0.25, 0.25, 0.25) - 0.25).abs() < 1e-15);
        let only_first = ScoreWeights::new(1.0, 0.0, 0.0).unwrap();
        assert_eq!(only_first.combine(0.4, 0.9, 1.0), 0.4);
        assert!(ScoreWeights::new(0.5, 0.5, 0.2).is_err());
        assert!(ScoreWeights::new(1.2, -0.1, -0.1).is_err());
        assert!(ScoreWeights::<f32>::equal().validate().is_ok());
    }

    fn cand(i: usize, phi: f64) -> ScoredCandidate<f64> {
        ScoredCandidate {
            datapoint: dp(1, "Photo", &format!("t{i}"), "delete", &[]),
            phi1: phi,
            phi2: phi,
            phi3: 0.0,
            phi,
        }
    }

    #[test]
    fn top_n_basics() {
        let cs: Vec<_> = [0.1, 0.9, 0.5, 0.7].iter().enumerate().map(|(i, &p)| cand(i, p)).collect();
        let all = sample_top_n(cs.clone(), 10, 0, &BTreeSet::new());
        assert_eq!(all.len(), 4);
        let top2 = sample_top_n(cs.clone(), 2, 0, &BTreeSet::new());
        let phis: Vec<f64> = top2.iter().map(|c| c.phi).collect();
        assert_eq!(phis, [0.9, 0.7]);
        let excluded: BTreeSet<TestKey> = [cs[1].datapoint.key().clone()].into();
        let top2 = sample_top_n(cs.clone(), 2, 0, &excluded);
        let phis: Vec<f64> = top2.iter().map(|c| c.phi).collect();
        assert_eq!(phis, [0.7, 0.5]);
        assert!(sample_top_n(cs, 0, 0, &BTreeSet::new()).is_empty());
    }

    #[test]
    fn raising_a_score_above_the_boundary_selects_it() {
        let mut cs: Vec<_> = (0..10).map(|i| cand(i, 0.5)).collect();
        cs[7].phi = 0.51;
        for seed in 0..20 {
            let picked = sample_top_n(cs.clone(), 3, seed, &BTreeSet::new());
            assert!(picked.iter().any(|c| c.datapoint == cs[7].datapoint));
        }
    }
}
