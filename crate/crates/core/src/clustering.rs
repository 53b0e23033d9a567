//! K-Modes over (content type, violation type) pairs, plus elbow-method
//! selection of k.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CategoricalPoint {
    pub content_type: String,
    pub violation: String,
}

impl CategoricalPoint {
    pub fn new(content_type: impl Into<String>, violation: impl Into<String>) -> Self {
        CategoricalPoint {
            content_type: content_type.into(),
            violation: violation.into(),
        }
    }
}

/// Number of mismatched components.
pub fn distance(p: &CategoricalPoint, q: &CategoricalPoint) -> usize {
    usize::from(p.content_type != q.content_type) + usize::from(p.violation != q.violation)
}

pub const DEFAULT_RESTARTS: usize = 8;
pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_ELBOW_EPSILON: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterModel {
    centers: Vec<CategoricalPoint>,
    seed: u64,
    cost: usize,
    /// Total cost after each assignment step of the winning restart.
    #[serde(skip)]
    cost_history: Vec<usize>,
}

impl ClusterModel {
    /// A model with fixed centers, e.g. loaded from a diagnostic file.
    pub fn from_centers(centers: Vec<CategoricalPoint>) -> Self {
        assert!(!centers.is_empty(), "a cluster model needs at least one center");
        ClusterModel {
            centers,
            seed: 0,
            cost: 0,
            cost_history: Vec::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[CategoricalPoint] {
        &self.centers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn cost(&self) -> usize {
        self.cost
    }

    pub fn cost_history(&self) -> &[usize] {
        &self.cost_history
    }

    /// Index of the nearest center; ties go to the lowest index.
    pub fn assign(&self, p: &CategoricalPoint) -> usize {
        nearest(&self.centers, p).0
    }

    pub fn total_cost(&self, points: &[CategoricalPoint]) -> usize {
        points.iter().map(|p| nearest(&self.centers, p).1).sum()
    }

    pub fn to_diagnostic_json(&self) -> String {
        #[derive(Serialize)]
        struct Diag<'a> {
            k: usize,
            centers: &'a [CategoricalPoint],
            cost: usize,
        }
        serde_json::to_string_pretty(&Diag {
            k: self.k(),
            centers: &self.centers,
            cost: self.cost,
        })
        .expect("diagnostic serializes")
    }
}

pub fn assign(p: &CategoricalPoint, model: &ClusterModel) -> usize {
    model.assign(p)
}

fn nearest(centers: &[CategoricalPoint], p: &CategoricalPoint) -> (usize, usize) {
    let mut best = (0, usize::MAX);
    for (i, c) in centers.iter().enumerate() {
        let d = distance(c, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Distinct points with multiplicities, sorted.
fn compress(points: &[CategoricalPoint]) -> Vec<(CategoricalPoint, usize)> {
    let mut m: BTreeMap<&CategoricalPoint, usize> = BTreeMap::new();
    for p in points {
        *m.entry(p).or_default() += 1;
    }
    m.into_iter().map(|(p, w)| (p.clone(), w)).collect()
}

/// Weighted mode of one component; ties go to the smallest label.
fn mode<'a>(values: impl Iterator<Item = (&'a str, usize)>) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (v, w) in values {
        *counts.entry(v).or_default() += w;
    }
    // max_by_key keeps the last maximum; iterate in reverse so the
    // lexicographically smallest wins.
    counts.into_iter().rev().max_by_key(|&(_, w)| w).map(|(v, _)| v.to_owned())
}

struct Run {
    centers: Vec<CategoricalPoint>,
    cost: usize,
    history: Vec<usize>,
}

fn lloyd(data: &[(CategoricalPoint, usize)], mut centers: Vec<CategoricalPoint>, max_iter: usize) -> Run {
    let k = centers.len();
    let mut history = Vec::new();
    let mut assignment = vec![(0usize, 0usize); data.len()];
    for _ in 0..max_iter.max(1) {
        let mut cost = 0;
        for (slot, (p, w)) in assignment.iter_mut().zip(data) {
            *slot = nearest(&centers, p);
            cost += slot.1 * w;
        }
        history.push(cost);

        let mut next = Vec::with_capacity(k);
        for j in 0..k {
            let members = || data.iter().zip(&assignment).filter(move |(_, a)| a.0 == j).map(|(pw, _)| pw);
            let c = mode(members().map(|(p, w)| (p.content_type.as_str(), *w)));
            let v = mode(members().map(|(p, w)| (p.violation.as_str(), *w)));
            next.push(match (c, v) {
                (Some(c), Some(v)) => Some(CategoricalPoint::new(c, v)),
                _ => None,
            });
        }
        // Empty clusters take the worst-served point not already a center.
        let mut taken: Vec<CategoricalPoint> = next.iter().flatten().cloned().collect();
        let mut updated = Vec::with_capacity(k);
        for (j, c) in next.into_iter().enumerate() {
            match c {
                Some(c) => updated.push(c),
                None => {
                    let far = data
                        .iter()
                        .zip(&assignment)
                        .filter(|((p, _), a)| a.1 > 0 && !taken.contains(p))
                        .max_by(|x, y| x.1 .1.cmp(&y.1 .1).then_with(|| y.0 .0.cmp(&x.0 .0)))
                        .map(|((p, _), _)| p.clone());
                    let c = far.unwrap_or_else(|| centers[j].clone());
                    taken.push(c.clone());
                    updated.push(c);
                }
            }
        }
        if updated == centers {
            break;
        }
        centers = updated;
    }
    let cost = data.iter().map(|(p, w)| nearest(&centers, p).1 * w).sum();
    if history.last() != Some(&cost) {
        history.push(cost);
    }
    Run { centers, cost, history }
}

/// Fit K-Modes with `restarts` seeded initializations and keep the cheapest.
pub fn kmodes_fit(points: &[CategoricalPoint], k: usize, seed: u64, restarts: usize) -> Result<ClusterModel> {
    kmodes_fit_with(points, k, seed, restarts, DEFAULT_MAX_ITER)
}

pub fn kmodes_fit_with(
    points: &[CategoricalPoint],
    k: usize,
    seed: u64,
    restarts: usize,
    max_iter: usize,
) -> Result<ClusterModel> {
    if points.is_empty() {
        return Err(Error::EmptyPoints);
    }
    let data = compress(points);
    if k == 0 || k > data.len() {
        return Err(Error::ClusterCount { k, distinct: data.len() });
    }
    let mut best: Option<Run> = None;
    for r in 0..restarts.max(1) {
        let mut rng = seeds::rng(seed, "kmodes-init", &[k as u64, r as u64]);
        let centers: Vec<CategoricalPoint> = data
            .choose_multiple(&mut rng, k)
            .map(|(p, _)| p.clone())
            .collect();
        let run = lloyd(&data, centers, max_iter);
        if best.as_ref().is_none_or(|b| run.cost < b.cost) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");
    Ok(ClusterModel {
        centers: best.centers,
        seed,
        cost: best.cost,
        cost_history: best.history,
    })
}

pub fn distinct_count(points: &[CategoricalPoint]) -> usize {
    compress(points).len()
}

/// Smallest k whose relative cost improvement to k + 1 is below `epsilon`;
/// the top of the (clamped) range if none is.
pub fn elbow_select_k(
    points: &[CategoricalPoint],
    k_range: RangeInclusive<usize>,
    epsilon: f64,
    seed: u64,
    restarts: usize,
) -> Result<usize> {
    if points.is_empty() {
        return Err(Error::EmptyPoints);
    }
    let distinct = distinct_count(points);
    let hi = (*k_range.end()).clamp(1, distinct);
    let lo = (*k_range.start()).clamp(1, hi);
    let cost = |k: usize| kmodes_fit(points, k, seeds::derive(seed, "elbow", &[k as u64]), restarts).map(|m| m.cost());
    let mut current = cost(lo)?;
    for k in lo..hi {
        let next = cost(k + 1)?;
        let improvement = if current == 0 {
            0.0
        } else {
            (current as f64 - next as f64) / current as f64
        };
        if improvement < epsilon {
            return Ok(k);
        }
        current = next;
    }
    Ok(hi)
}

/// How k is chosen for each daily fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum KPolicy {
    Fixed { k: usize },
    Elbow { min_k: usize, max_k: usize, epsilon: f64 },
}

impl Default for KPolicy {
    fn default() -> Self {
        KPolicy::Elbow {
            min_k: 1,
            max_k: 8,
            epsilon: DEFAULT_ELBOW_EPSILON,
        }
    }
}

impl KPolicy {
    /// Fit a model under this policy; k is clamped to the distinct count.
    pub fn fit(&self, points: &[CategoricalPoint], seed: u64, restarts: usize) -> Result<ClusterModel> {
        let distinct = distinct_count(points);
        let k = match *self {
            KPolicy::Fixed { k } => k.clamp(1, distinct.max(1)),
            KPolicy::Elbow { min_k, max_k, epsilon } => elbow_select_k(points, min_k..=max_k, epsilon, seed, restarts)?,
        };
        kmodes_fit(points, k, seed, restarts)
    }
}
