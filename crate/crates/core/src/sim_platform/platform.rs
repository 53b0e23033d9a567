use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rules::{FaultEffect, FaultInjection, FaultPlan, NoiseModel, RuleKey, RuleTable};
use crate::error::{Error, Result};
use crate::log_model::{canonical_actions, canonical_tags, Datestamp};
use crate::seeds;
use crate::template::{Step, TestActivity};

pub type ContentId = u64;
pub type ReportId = u64;
pub type JobId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlatformConfig {
    /// Observations not produced within this many steps count as absent.
    pub horizon_steps: u64,
    /// Steps between a report and its review job becoming visible.
    pub review_latency_steps: u64,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        PlatformConfig {
            horizon_steps: 100,
            review_latency_steps: 1,
        }
    }
}

#[derive(Debug, Clone)]
struct Content {
    content_type: String,
    executed: Vec<Vec<String>>,
}

#[derive(Debug, Clone)]
struct ReviewJob {
    content: ContentId,
    tags: Vec<String>,
    open: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct PendingJob {
    report: ReportId,
    content: ContentId,
    tags: Vec<String>,
}

/// Builds isolated platform instances that share rules, noise and faults
/// for one simulated day.
#[derive(Debug, Clone, Copy)]
pub struct PlatformFactory<'a> {
    pub rules: &'a RuleTable,
    pub noise: &'a NoiseModel,
    pub faults: &'a FaultPlan,
    pub config: PlatformConfig,
    pub day: Datestamp,
}

impl<'a> PlatformFactory<'a> {
    pub fn new(rules: &'a RuleTable, noise: &'a NoiseModel, faults: &'a FaultPlan, day: Datestamp) -> Self {
        PlatformFactory {
            rules,
            noise,
            faults,
            config: PlatformConfig::default(),
            day,
        }
    }

    pub fn with_config(mut self, config: PlatformConfig) -> Self {
        self.config = config;
        self
    }

    pub fn on_day(mut self, day: Datestamp) -> Self {
        self.day = day;
        self
    }

    pub fn instance(&self, seed: u64) -> Platform<'a> {
        Platform {
            rules: self.rules,
            noise: self.noise,
            faults: self.faults.active(self.day).collect(),
            config: self.config,
            rng: seeds::rng(seed, "platform", &[]),
            clock: 0,
            seq: 0,
            contents: Vec::new(),
            jobs: Vec::new(),
            job_of_report: Vec::new(),
            pending: BinaryHeap::new(),
        }
    }
}

/// One single-threaded simulated platform: content store, review queue,
/// reviewer endpoint and enforcement engine, driven by a step clock.
#[derive(Debug)]
pub struct Platform<'a> {
    rules: &'a RuleTable,
    noise: &'a NoiseModel,
    faults: Vec<&'a FaultInjection>,
    config: PlatformConfig,
    rng: ChaCha8Rng,
    clock: u64,
    seq: u64,
    contents: Vec<Content>,
    jobs: Vec<ReviewJob>,
    job_of_report: Vec<Option<JobId>>,
    pending: BinaryHeap<Reverse<(u64, u64, PendingJob)>>,
}

impl Platform<'_> {
    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn post_content(&mut self, content_type: &str) -> Result<ContentId> {
        self.clock += 1;
        if content_type.trim().is_empty() {
            return Err(Error::EmptyField("content_type"));
        }
        if !self.rules.has_content_type(content_type) {
            return Err(Error::UnknownContentType(content_type.to_owned()));
        }
        self.contents.push(Content {
            content_type: content_type.to_owned(),
            executed: Vec::new(),
        });
        Ok(self.contents.len() as ContentId - 1)
    }

    pub fn content_type(&self, id: ContentId) -> Option<&str> {
        self.contents.get(id as usize).map(|c| c.content_type.as_str())
    }

    /// Action lists executed against a content item so far.
    pub fn executed_actions(&self, id: ContentId) -> Option<&[Vec<String>]> {
        self.contents.get(id as usize).map(|c| c.executed.as_slice())
    }

    /// File a report. The review job appears after the configured latency
    /// unless a review-path fault intervenes.
    pub fn report_content<S: AsRef<str>>(&mut self, content: ContentId, tags: &[S]) -> Result<ReportId> {
        self.clock += 1;
        let c = self.contents.get(content as usize).ok_or(Error::UnknownContent(content))?;
        let tags = canonical_tags(tags);
        let report = self.job_of_report.len() as ReportId;
        self.job_of_report.push(None);

        let mut delay = self.config.review_latency_steps;
        for f in self.faults.iter().filter(|f| f.matches_report(&c.content_type, &tags)) {
            match f.effect {
                FaultEffect::DropReviewJob => return Ok(report),
                FaultEffect::DelayReviewJob(n) => delay += n,
                _ => {}
            }
        }
        self.seq += 1;
        self.pending.push(Reverse((
            self.clock + delay,
            self.seq,
            PendingJob { report, content, tags },
        )));
        self.deliver();
        Ok(report)
    }

    fn deliver(&mut self) {
        while let Some(Reverse((due, _, _))) = self.pending.peek() {
            if *due > self.clock {
                break;
            }
            let Reverse((_, _, job)) = self.pending.pop().expect("peeked");
            self.jobs.push(ReviewJob {
                content: job.content,
                tags: job.tags,
                open: true,
            });
            self.job_of_report[job.report as usize] = Some(self.jobs.len() as JobId - 1);
        }
    }

    /// Advance the clock by one step.
    pub fn step(&mut self) {
        self.clock += 1;
        self.deliver();
    }

    /// Step until nothing is pending or the horizon is reached.
    pub fn settle(&mut self) {
        while !self.pending.is_empty() && self.clock < self.config.horizon_steps {
            self.step();
        }
    }

    pub fn job_for_report(&self, report: ReportId) -> Option<JobId> {
        self.job_of_report.get(report as usize).copied().flatten()
    }

    /// Poll for the review job of `report` until the step horizon.
    pub fn await_review_job(&mut self, report: ReportId) -> Option<JobId> {
        loop {
            if let Some(j) = self.job_for_report(report) {
                return Some(j);
            }
            if self.clock >= self.config.horizon_steps || self.pending.is_empty() {
                return None;
            }
            self.step();
        }
    }

    pub fn open_jobs(&self) -> usize {
        self.jobs.iter().filter(|j| j.open).count()
    }

    /// Submit a reviewer decision. Enforcement runs immediately: rule table,
    /// then active faults, then noise. Returns the executed action list.
    pub fn respond_review(&mut self, job: JobId, decision: &str) -> Result<Vec<String>> {
        self.clock += 1;
        let j = match self.jobs.get_mut(job as usize) {
            Some(j) if j.open => j,
            _ => return Err(Error::NoOpenJob(job)),
        };
        j.open = false;
        let content = j.content;
        let key = RuleKey {
            content_type: self.contents[content as usize].content_type.clone(),
            report_tags: j.tags.clone(),
            decision: decision.trim().to_owned(),
        };
        let mut actions = self.rules.lookup(&key).map(<[String]>::to_vec).unwrap_or_default();
        for f in self.faults.iter().filter(|f| f.key == key) {
            match &f.effect {
                FaultEffect::MutateActions(a) => actions = a.clone(),
                FaultEffect::SuppressActions => actions.clear(),
                _ => {}
            }
        }
        let actions = canonical_actions(&self.noise.apply(&key, &actions, &mut self.rng));
        self.contents[content as usize].executed.push(actions.clone());
        Ok(actions)
    }
}

/// What the test harness saw, in template order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceEvent {
    Posted {
        content_type: String,
        content: Option<ContentId>,
    },
    Reported {
        tags: Vec<String>,
    },
    ReviewJob(Option<JobId>),
    Responded {
        decision: String,
    },
    Actions(Option<Vec<String>>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    events: Vec<TraceEvent>,
    steps: u64,
}

impl ExecutionTrace {
    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn review_job(&self) -> Option<JobId> {
        self.events.iter().find_map(|e| match e {
            TraceEvent::ReviewJob(j) => *j,
            _ => None,
        })
    }

    pub fn review_job_observed(&self) -> bool {
        self.review_job().is_some()
    }

    pub fn observed_actions(&self) -> Option<&[String]> {
        self.events.iter().find_map(|e| match e {
            TraceEvent::Actions(Some(a)) => Some(a.as_slice()),
            _ => None,
        })
    }

    /// A trace with the given observation slots, for oracle checks that do
    /// not need a platform.
    pub fn synthetic<S: AsRef<str>>(job_observed: bool, actions: Option<&[S]>) -> Self {
        let actions = actions.map(|a| a.iter().map(|s| s.as_ref().to_owned()).collect());
        ExecutionTrace {
            events: vec![
                TraceEvent::Posted {
                    content_type: "synthetic".into(),
                    content: Some(0),
                },
                TraceEvent::Reported { tags: Vec::new() },
                TraceEvent::ReviewJob(job_observed.then_some(0)),
                TraceEvent::Responded {
                    decision: "synthetic".into(),
                },
                TraceEvent::Actions(actions),
            ],
            steps: 0,
        }
    }

    pub fn summary(&self) -> String {
        let job = if self.review_job_observed() { "job observed" } else { "no review job" };
        match self.observed_actions() {
            Some(a) => format!("{job}; actions [{}]", a.join(", ")),
            None => format!("{job}; no actions observed"),
        }
    }
}

/// Run a test activity on a fresh platform instance.
pub fn execute_activity(factory: &PlatformFactory<'_>, activity: &TestActivity, seed: u64) -> ExecutionTrace {
    let mut p = factory.instance(seed);
    let mut events = Vec::with_capacity(5);
    let mut content = None;
    let mut report = None;
    let mut job = None;

    for step in activity.steps() {
        match step {
            Step::Post(c) => {
                content = p.post_content(c).ok();
                events.push(TraceEvent::Posted {
                    content_type: c.clone(),
                    content,
                });
            }
            Step::Report(tags) => {
                report = content.and_then(|id| p.report_content(id, tags).ok());
                events.push(TraceEvent::Reported { tags: tags.clone() });
            }
            Step::ObserveReviewJob => {
                job = report.and_then(|r| p.await_review_job(r));
                events.push(TraceEvent::ReviewJob(job));
            }
            Step::Respond(d) => {
                if job.is_some() {
                    events.push(TraceEvent::Responded { decision: d.clone() });
                }
            }
            Step::ObserveActions => {
                let decision = activity.decision();
                let actions = job.and_then(|j| p.respond_review(j, decision).ok());
                let actions = actions.filter(|_| p.clock() <= factory.config.horizon_steps);
                events.push(TraceEvent::Actions(actions));
            }
        }
    }
    ExecutionTrace {
        events,
        steps: p.clock(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::log_model::{canonicalize, RawDatapoint};
    use crate::template::instantiate;

    fn rules() -> RuleTable {
        RuleTable::new()
            .with("LiveVideo", &["unauthorized sales"], "delete", &["Delete"])
            .with("Photo", &["spam"], "delete", &["Delete", "Checkpoint"])
    }

    fn live_video_key() -> RuleKey {
        RuleKey::new("LiveVideo", &["unauthorized sales"], "delete")
    }

    #[test]
    fn post_content() {
        let (r, n, f) = (rules(), NoiseModel::off(), FaultPlan::none());
        let mut p = PlatformFactory::new(&r, &n, &f, Datestamp(0)).instance(1);
        let id = p.post_content("Photo").unwrap();
        assert_eq!(p.content_type(id), Some("Photo"));
        let id = p.post_content("LiveVideo").unwrap();
        assert_eq!(p.content_type(id), Some("LiveVideo"));
        assert!(matches!(p.post_content(""), Err(Error::EmptyField(_))));
        assert!(matches!(p.post_content("Hologram"), Err(Error::UnknownContentType(_))));
    }

    #[test]
    fn reports_create_independent_jobs() {
        let (r, n, f) = (rules(), NoiseModel::off(), FaultPlan::none());
        let mut p = PlatformFactory::new(&r, &n, &f, Datestamp(0)).instance(1);
        let id = p.post_content("Photo").unwrap();
        let r1 = p.report_content(id, &["spam"]).unwrap();
        p.settle();
        assert_eq!(p.open_jobs(), 1);
        let r2 = p.report_content(id, &["spam"]).unwrap();
        p.settle();
        assert_eq!(p.open_jobs(), 2);
        assert_ne!(p.job_for_report(r1), p.job_for_report(r2));
        assert!(matches!(p.report_content(99, &["spam"]), Err(Error::UnknownContent(99))));
    }

    #[test]
    fn respond_review_executes_rule_outcome_and_closes_job() {
        let (r, n, f) = (rules(), NoiseModel::off(), FaultPlan::none());
        let mut p = PlatformFactory::new(&r, &n, &f, Datestamp(0)).instance(1);
        let id = p.post_content("LiveVideo").unwrap();
        let rep = p.report_content(id, &["unauthorized sales"]).unwrap();
        let job = p.await_review_job(rep).unwrap();
        assert_eq!(p.respond_review(job, "delete").unwrap(), ["Delete"]);
        assert_eq!(p.executed_actions(id).unwrap(), [vec!["Delete".to_string()]]);
        assert!(matches!(p.respond_review(job, "delete"), Err(Error::NoOpenJob(_))));
        assert!(matches!(p.respond_review(42, "delete"), Err(Error::NoOpenJob(42))));
    }

    #[test]
    fn suppression_fault_empties_actions_from_activation_day() {
        let (r, n) = (rules(), NoiseModel::off());
        let f = FaultPlan::new(vec![FaultInjection {
            day: Datestamp(3),
            key: live_video_key(),
            effect: FaultEffect::SuppressActions,
        }]);
        let run = |day| {
            let mut p = PlatformFactory::new(&r, &n, &f, Datestamp(day)).instance(1);
            let id = p.post_content("LiveVideo").unwrap();
            let rep = p.report_content(id, &["unauthorized sales"]).unwrap();
            let job = p.await_review_job(rep).unwrap();
            p.respond_review(job, "delete").unwrap()
        };
        assert_eq!(run(2), ["Delete"]);
        assert!(run(3).is_empty());
    }

    #[test]
    fn zero_noise_is_deterministic_across_seeds() {
        let (r, n, f) = (rules(), NoiseModel::off(), FaultPlan::none());
        let factory = PlatformFactory::new(&r, &n, &f, Datestamp(0));
        let observed: Vec<Vec<String>> = (0..100)
            .map(|seed| {
                let mut p = factory.instance(seed);
                let id = p.post_content("Photo").unwrap();
                let rep = p.report_content(id, &["spam"]).unwrap();
                let job = p.await_review_job(rep).unwrap();
                p.respond_review(job, "delete").unwrap()
            })
            .collect();
        assert!(observed.iter().all(|a| a == &observed[0]));
    }

    fn live_video_test() -> crate::template::InferredTest {
        instantiate(
            &canonicalize(&RawDatapoint::new(1, "LiveVideo", &["unauthorized sales"], "delete", &["Delete"]))
                .unwrap(),
        )
    }

    #[test]
    fn execute_activity_on_clean_platform() {
        let (r, n, f) = (rules(), NoiseModel::off(), FaultPlan::none());
        let factory = PlatformFactory::new(&r, &n, &f, Datestamp(1));
        let test = live_video_test();
        let trace = execute_activity(&factory, &test.activity, 5);
        assert!(trace.review_job_observed());
        assert_eq!(trace.observed_actions(), Some(&["Delete".to_string()][..]));
        assert!(test.oracle.evaluate(&trace).passed());
        assert_eq!(trace, execute_activity(&factory, &test.activity, 6));
        let kinds: Vec<u8> = trace
            .events()
            .iter()
            .map(|e| match e {
                TraceEvent::Posted { .. } => 1,
                TraceEvent::Reported { .. } => 2,
                TraceEvent::ReviewJob(_) => 3,
                TraceEvent::Responded { .. } => 4,
                TraceEvent::Actions(_) => 5,
            })
            .collect();
        assert_eq!(kinds, [1, 2, 3, 4, 5]);
    }

    #[test]
    fn dropped_review_job_leaves_both_observations_absent() {
        let (r, n) = (rules(), NoiseModel::off());
        let f = FaultPlan::new(vec![FaultInjection {
            day: Datestamp(0),
            key: live_video_key(),
            effect: FaultEffect::DropReviewJob,
        }]);
        let factory = PlatformFactory::new(&r, &n, &f, Datestamp(1));
        let test = live_video_test();
        let trace = execute_activity(&factory, &test.activity, 5);
        assert!(!trace.review_job_observed());
        assert_eq!(trace.observed_actions(), None);
        assert!(!test.oracle.evaluate(&trace).passed());
        assert!(!trace.events().iter().any(|e| matches!(e, TraceEvent::Responded { .. })));
    }

    #[test]
    fn review_job_beyond_horizon_is_absent() {
        let (r, n) = (rules(), NoiseModel::off());
        let f = FaultPlan::new(vec![FaultInjection {
            day: Datestamp(0),
            key: live_video_key(),
            effect: FaultEffect::DelayReviewJob(500),
        }]);
        let factory = PlatformFactory::new(&r, &n, &f, Datestamp(0));
        let trace = execute_activity(&factory, &live_video_test().activity, 0);
        assert!(!trace.review_job_observed());
        assert!(trace.steps() <= PlatformConfig::default().horizon_steps);

        let short = FaultPlan::new(vec![FaultInjection {
            day: Datestamp(0),
            key: live_video_key(),
            effect: FaultEffect::DelayReviewJob(20),
        }]);
        let factory = PlatformFactory::new(&r, &n, &short, Datestamp(0));
        let trace = execute_activity(&factory, &live_video_test().activity, 0);
        assert!(trace.review_job_observed());
    }

    #[test]
    fn unknown_content_type_yields_absent_observations() {
        let (r, n, f) = (rules(), NoiseModel::off(), FaultPlan::none());
        let factory = PlatformFactory::new(&r, &n, &f, Datestamp(0));
        let activity = TestActivity::new("Hologram", &["spam".into()], "delete");
        let trace = execute_activity(&factory, &activity, 0);
        assert!(!trace.review_job_observed());
        assert!(trace.observed_actions().is_none());
    }

    #[test]
    fn interleaved_instances_match_sequential_runs() {
        let (r, f) = (rules(), FaultPlan::none());
        let n = NoiseModel::uniform(0.5);
        let factory = PlatformFactory::new(&r, &n, &f, Datestamp(0));
        let act = live_video_test().activity;
        let sequential: Vec<_> = (0..20).map(|s| execute_activity(&factory, &act, s)).collect();
        let mut a = factory.instance(100);
        let mut b = factory.instance(101);
        let ca = a.post_content("Photo").unwrap();
        let cb = b.post_content("Photo").unwrap();
        a.report_content(ca, &["spam"]).unwrap();
        b.report_content(cb, &["spam"]).unwrap();
        a.settle();
        assert_eq!(a.open_jobs(), 1);
        assert_eq!(b.open_jobs(), 0);
        use rayon::prelude::*;
        let parallel: Vec<_> = (0..20u64).into_par_iter().map(|s| execute_activity(&factory, &act, s)).collect();
        assert_eq!(sequential, parallel);
    }
}
