//! Production datapoints, test keys, the violation-type map and the two
//! append-only log stores (production and simulated-execution logs).

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a simulated day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Datestamp(pub u32);

impl Datestamp {
    pub fn prev(self) -> Option<Datestamp> {
        self.0.checked_sub(1).map(Datestamp)
    }

    pub fn next(self) -> Datestamp {
        Datestamp(self.0 + 1)
    }
}

impl fmt::Display for Datestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A datapoint as it appears on the wire, before canonicalization. Every
/// field is optional so that missing fields can be reported by name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawDatapoint {
    pub day: Option<u32>,
    pub content_type: Option<String>,
    pub report_tags: Option<Vec<String>>,
    pub decision: Option<String>,
    pub actions: Option<Vec<String>>,
}

impl RawDatapoint {
    pub fn new<S: AsRef<str>>(day: u32, content_type: &str, report_tags: &[S], decision: &str, actions: &[S]) -> Self {
        RawDatapoint {
            day: Some(day),
            content_type: Some(content_type.to_owned()),
            report_tags: Some(report_tags.iter().map(|s| s.as_ref().to_owned()).collect()),
            decision: Some(decision.to_owned()),
            actions: Some(actions.iter().map(|s| s.as_ref().to_owned()).collect()),
        }
    }
}

/// Lowercase, trim, drop blanks, sort and deduplicate report tags.
pub fn canonical_tags<S: AsRef<str>>(tags: &[S]) -> Vec<String> {
    let mut out: Vec<String> = tags
        .iter()
        .map(|t| t.as_ref().trim().to_lowercase())
        .filter(|t| !t.is_empty())
        .collect();
    out.sort();
    out.dedup();
    out
}

/// Sorted multiset representative of an action list. Labels keep their case.
pub fn canonical_actions<S: AsRef<str>>(actions: &[S]) -> Vec<String> {
    let mut out: Vec<String> = actions
        .iter()
        .map(|a| a.as_ref().trim().to_owned())
        .filter(|a| !a.is_empty())
        .collect();
    out.sort();
    out
}

/// Identity of an inferred test: the datapoint without its datestamp.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "KeyRecord", into = "KeyRecord")]
pub struct TestKey {
    content_type: String,
    report_tags: Vec<String>,
    decision: String,
    actions: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct KeyRecord {
    content_type: String,
    report_tags: Vec<String>,
    decision: String,
    actions: Vec<String>,
}

impl TryFrom<KeyRecord> for TestKey {
    type Error = Error;

    fn try_from(k: KeyRecord) -> Result<Self> {
        TestKey::new(&k.content_type, &k.report_tags, &k.decision, &k.actions)
    }
}

impl From<TestKey> for KeyRecord {
    fn from(k: TestKey) -> Self {
        KeyRecord {
            content_type: k.content_type,
            report_tags: k.report_tags,
            decision: k.decision,
            actions: k.actions,
        }
    }
}

impl TestKey {
    pub fn new<S: AsRef<str>, T: AsRef<str>>(
        content_type: &str,
        report_tags: &[S],
        decision: &str,
        actions: &[T],
    ) -> Result<Self> {
        let content_type = content_type.trim();
        if content_type.is_empty() {
            return Err(Error::EmptyField("content_type"));
        }
        let report_tags = canonical_tags(report_tags);
        if report_tags.is_empty() {
            return Err(Error::EmptyField("report_tags"));
        }
        let decision = decision.trim();
        if decision.is_empty() {
            return Err(Error::EmptyField("decision"));
        }
        Ok(TestKey {
            content_type: content_type.to_owned(),
            report_tags,
            decision: decision.to_owned(),
            actions: canonical_actions(actions),
        })
    }

    pub fn content_type(&self) -> &str {
        &self.content_type
    }

    pub fn report_tags(&self) -> &[String] {
        &self.report_tags
    }

    pub fn decision(&self) -> &str {
        &self.decision
    }

    pub fn actions(&self) -> &[String] {
        &self.actions
    }

    /// True when `other` has the same content type, tags and decision.
    pub fn same_stimuli(&self, other: &TestKey) -> bool {
        self.content_type == other.content_type
            && self.report_tags == other.report_tags
            && self.decision == other.decision
    }

    /// Stable hex digest used to name emitted test files.
    pub fn stable_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for part in [
            self.content_type.as_str(),
            &self.report_tags.join("\u{1f}"),
            self.decision.as_str(),
            &self.actions.join("\u{1f}"),
        ] {
            h.update(part.as_bytes());
            h.update([0x1e]);
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Display for TestKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} [{}] {} -> [{}]",
            self.content_type,
            self.report_tags.join(", "),
            self.decision,
            self.actions.join(", ")
        )
    }
}

/// The 5-tuple mined from production logs.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawDatapoint", into = "RawDatapoint")]
pub struct Datapoint {
    t: Datestamp,
    key: TestKey,
}

impl TryFrom<RawDatapoint> for Datapoint {
    type Error = Error;

    fn try_from(raw: RawDatapoint) -> Result<Self> {
        canonicalize(&raw)
    }
}

impl From<Datapoint> for RawDatapoint {
    fn from(x: Datapoint) -> Self {
        RawDatapoint {
            day: Some(x.t.0),
            content_type: Some(x.key.content_type),
            report_tags: Some(x.key.report_tags),
            decision: Some(x.key.decision),
            actions: Some(x.key.actions),
        }
    }
}

impl Datapoint {
    pub fn new(t: Datestamp, key: TestKey) -> Self {
        Datapoint { t, key }
    }

    pub fn t(&self) -> Datestamp {
        self.t
    }

    pub fn c(&self) -> &str {
        &self.key.content_type
    }

    pub fn r(&self) -> &[String] {
        &self.key.report_tags
    }

    pub fn d(&self) -> &str {
        &self.key.decision
    }

    pub fn a(&self) -> &[String] {
        &self.key.actions
    }

    pub fn key(&self) -> &TestKey {
        &self.key
    }

    pub fn to_raw(&self) -> RawDatapoint {
        self.clone().into()
    }
}

/// Validate a raw record and bring it to canonical form.
pub fn canonicalize(raw: &RawDatapoint) -> Result<Datapoint> {
    let day = raw.day.ok_or(Error::MissingField("day"))?;
    let c = raw.content_type.as_deref().ok_or(Error::MissingField("content_type"))?;
    let r = raw.report_tags.as_deref().ok_or(Error::MissingField("report_tags"))?;
    let d = raw.decision.as_deref().ok_or(Error::MissingField("decision"))?;
    let a = raw.actions.as_deref().ok_or(Error::MissingField("actions"))?;
    Ok(Datapoint {
        t: Datestamp(day),
        key: TestKey::new(c, r, d, a)?,
    })
}

pub const DEFAULT_VIOLATION: &str = "UNMAPPED";
const DEFAULT_KEY: &str = "__default__";

/// Maps a canonical report-tag list to a violation type. Total: unmapped
/// lists get the default label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViolationMap {
    by_tags: BTreeMap<String, String>,
    default: String,
}

impl Default for ViolationMap {
    fn default() -> Self {
        ViolationMap {
            by_tags: BTreeMap::new(),
            default: DEFAULT_VIOLATION.to_owned(),
        }
    }
}

fn join_key<S: AsRef<str>>(tags: &[S]) -> String {
    canonical_tags(tags).join("|")
}

impl ViolationMap {
    pub fn new(default: impl Into<String>) -> Self {
        ViolationMap {
            by_tags: BTreeMap::new(),
            default: default.into(),
        }
    }

    pub fn insert<S: AsRef<str>>(&mut self, tags: &[S], label: impl Into<String>) {
        self.by_tags.insert(join_key(tags), label.into());
    }

    pub fn with<S: AsRef<str>>(mut self, tags: &[S], label: impl Into<String>) -> Self {
        self.insert(tags, label);
        self
    }

    pub fn violation_type<S: AsRef<str>>(&self, tags: &[S]) -> &str {
        // Fast path: callers almost always pass canonical tags already.
        let joined = tags.iter().map(|t| t.as_ref()).collect::<Vec<_>>().join("|");
        if let Some(v) = self.by_tags.get(&joined) {
            return v;
        }
        self.by_tags
            .get(&join_key(tags))
            .map(String::as_str)
            .unwrap_or(&self.default)
    }

    pub fn default_label(&self) -> &str {
        &self.default
    }

    /// All labels the map can produce, including the default.
    pub fn labels(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.by_tags.values().map(String::as_str).collect();
        v.push(&self.default);
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn from_json_str(s: &str) -> serde_json::Result<Self> {
        let raw: BTreeMap<String, String> = serde_json::from_str(s)?;
        let mut map = ViolationMap::default();
        for (k, v) in raw {
            if k == DEFAULT_KEY {
                map.default = v;
            } else {
                let tags: Vec<&str> = k.split('|').collect();
                map.insert(&tags, v);
            }
        }
        Ok(map)
    }

    pub fn to_json_string(&self) -> String {
        let mut raw = self.by_tags.clone();
        raw.insert(DEFAULT_KEY.to_owned(), self.default.clone());
        serde_json::to_string_pretty(&raw).expect("string map serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&s).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl Iterator<Item = T>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|source| Error::JsonLine {
            path: path.to_owned(),
            line: i + 1,
            source,
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Append-only production log, indexed by day.
#[derive(Debug, Clone, Default)]
pub struct ProductionLogStore {
    entries: Vec<Datapoint>,
    by_day: BTreeMap<Datestamp, Vec<usize>>,
}

impl ProductionLogStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, x: Datapoint) {
        self.by_day.entry(x.t).or_default().push(self.entries.len());
        self.entries.push(x);
    }

    pub fn day(&self, t: Datestamp) -> impl Iterator<Item = &Datapoint> + '_ {
        self.by_day
            .get(&t)
            .into_iter()
            .flatten()
            .map(move |&i| &self.entries[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Datapoint> + '_ {
        self.entries.iter()
    }

    pub fn days(&self) -> impl Iterator<Item = Datestamp> + '_ {
        self.by_day.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut store = Self::new();
        for x in read_jsonl::<Datapoint>(path)? {
            store.append(x);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, self.entries.iter())
    }
}

impl Extend<Datapoint> for ProductionLogStore {
    fn extend<I: IntoIterator<Item = Datapoint>>(&mut self, iter: I) {
        for x in iter {
            self.append(x);
        }
    }
}

/// One simulated execution of an inferred test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WWLogEntry {
    pub key: TestKey,
    pub day: Datestamp,
    pub passed: bool,
}

/// Append-only log of simulated executions, indexed by day.
#[derive(Debug, Clone, Default)]
pub struct WWLogStore {
    entries: Vec<WWLogEntry>,
    by_day: BTreeMap<Datestamp, Vec<usize>>,
}

impl WWLogStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, e: WWLogEntry) {
        self.by_day.entry(e.day).or_default().push(self.entries.len());
        self.entries.push(e);
    }

    /// Entries logged on day `t`, in append order.
    pub fn day_slice(&self, t: Datestamp) -> Vec<&WWLogEntry> {
        self.by_day
            .get(&t)
            .map(|ix| ix.iter().map(|&i| &self.entries[i]).collect())
            .unwrap_or_default()
    }

    pub fn all(&self) -> &[WWLogEntry] {
        &self.entries
    }

    pub fn days(&self) -> impl Iterator<Item = Datestamp> + '_ {
        self.by_day.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut store = Self::new();
        for e in read_jsonl::<WWLogEntry>(path)? {
            store.append(e);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, self.entries.iter())
    }
}

impl Extend<WWLogEntry> for WWLogStore {
    fn extend<I: IntoIterator<Item = WWLogEntry>>(&mut self, iter: I) {
        for e in iter {
            self.append(e);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw(day: u32, c: &str, r: &[&str], d: &str, a: &[&str]) -> RawDatapoint {
        RawDatapoint::new(day, c, r, d, a)
    }

    #[test]
    fn canonicalize_lowercases_and_dedups_tags() {
        let x = canonicalize(&raw(3, "Photo", &["Spam", "spam"], "delete", &["Delete"])).unwrap();
        assert_eq!(x.t(), Datestamp(3));
        assert_eq!(x.c(), "Photo");
        assert_eq!(x.r(), ["spam"]);
        assert_eq!(x.d(), "delete");
        assert_eq!(x.a(), ["Delete"]);
    }

    #[test]
    fn live_video_example_is_already_canonical() {
        let r = raw(1, "LiveVideo", &["unauthorized sales"], "delete", &["Delete"]);
        let x = canonicalize(&r).unwrap();
        assert_eq!(x.to_raw(), r);
    }

    #[test]
    fn missing_and_empty_fields_are_named() {
        let mut r = raw(1, "Photo", &["spam"], "delete", &[]);
        r.decision = None;
        assert!(matches!(canonicalize(&r), Err(Error::MissingField("decision"))));
        let r = raw(1, "", &["spam"], "delete", &[]);
        assert!(matches!(canonicalize(&r), Err(Error::EmptyField("content_type"))));
        let r = raw(1, "Photo", &[], "delete", &[]);
        assert!(matches!(canonicalize(&r), Err(Error::EmptyField("report_tags"))));
        let r = raw(1, "Photo", &[" "], "delete", &[]);
        assert!(matches!(canonicalize(&r), Err(Error::EmptyField("report_tags"))));
    }

    #[test]
    fn empty_action_list_is_allowed() {
        let x = canonicalize(&raw(0, "Photo", &["spam"], "ignore", &[])).unwrap();
        assert!(x.a().is_empty());
    }

    #[test]
    fn violation_map_lookup() {
        let v = ViolationMap::default()
            .with(&["nudity"], "Pornography")
            .with(&["nudity sexual activity"], "Pornography");
        assert_eq!(v.violation_type(&["nudity"]), "Pornography");
        assert_eq!(v.violation_type(&["nudity sexual activity"]), "Pornography");
        assert_eq!(v.violation_type(&["zzz-unknown"]), "UNMAPPED");
        // non-canonical input still resolves
        assert_eq!(v.violation_type(&["Nudity"]), "Pornography");
    }

    #[test]
    fn violation_map_json() {
        let v = ViolationMap::from_json_str(
            r#"{"spam|fake": "Spam", "nudity": "Pornography", "__default__": "Other"}"#,
        )
        .unwrap();
        assert_eq!(v.violation_type(&["fake", "spam"]), "Spam");
        assert_eq!(v.violation_type(&["hate"]), "Other");
        let back = ViolationMap::from_json_str(&v.to_json_string()).unwrap();
        assert_eq!(back, v);
    }

    fn entry(day: u32, passed: bool) -> WWLogEntry {
        WWLogEntry {
            key: TestKey::new("Photo", &["spam"], "delete", &["Delete"]).unwrap(),
            day: Datestamp(day),
            passed,
        }
    }

    #[test]
    fn day_slices() {
        let mut s = WWLogStore::new();
        assert!(s.day_slice(Datestamp(1)).is_empty());
        s.extend([entry(1, true), entry(1, false), entry(2, true)]);
        let d1 = s.day_slice(Datestamp(1));
        assert_eq!(d1.len(), 2);
        assert!(d1.iter().all(|e| e.day == Datestamp(1)));
        let total: usize = s.days().map(|t| s.day_slice(t).len()).sum();
        assert_eq!(total, s.len());
    }

    #[test]
    fn stores_round_trip_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ProductionLogStore::new();
        p.append(canonicalize(&raw(1, "LiveVideo", &["unauthorized sales"], "delete", &["Delete"])).unwrap());
        p.append(canonicalize(&raw(2, "Photo", &["spam"], "ignore", &[])).unwrap());
        let path = dir.path().join("prod.jsonl");
        p.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(r#"{"day":1,"content_type":"LiveVideo","report_tags":["unauthorized sales"],"decision":"delete","actions":["Delete"]}"#));
        let back = ProductionLogStore::load(&path).unwrap();
        assert_eq!(back.iter().collect::<Vec<_>>(), p.iter().collect::<Vec<_>>());
        assert_eq!(back.day(Datestamp(2)).count(), 1);

        let mut w = WWLogStore::new();
        w.extend([entry(1, true), entry(3, false)]);
        let path = dir.path().join("ww.jsonl");
        w.save(&path).unwrap();
        assert_eq!(WWLogStore::load(&path).unwrap().all(), w.all());
    }

    #[test]
    fn bad_jsonl_line_is_located() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"day\":1,\"content_type\":\"Photo\",\"report_tags\":[\"a\"],\"decision\":\"x\",\"actions\":[]}\n{\"day\":2}\n",
        )
        .unwrap();
        match ProductionLogStore::load(&path) {
            Err(Error::JsonLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn label() -> impl Strategy<Value = String> {
        "[A-Za-z ]{1,6}"
    }

    proptest! {
        #[test]
        fn canonical_form_is_idempotent_and_order_insensitive(
            day in 0u32..100,
            c in "[A-Za-z]{1,8}",
            mut r in prop::collection::vec(label(), 1..5),
            d in "[a-z]{1,8}",
            mut a in prop::collection::vec(label(), 0..4),
        ) {
            prop_assume!(r.iter().any(|t| !t.trim().is_empty()));
            let x = canonicalize(&RawDatapoint::new(day, &c, &r, &d, &a)).unwrap();
            prop_assert_eq!(canonicalize(&x.to_raw()).unwrap(), x.clone());
            r.reverse();
            a.reverse();
            let y = canonicalize(&RawDatapoint::new(day + 1, &c, &r, &d, &a)).unwrap();
            prop_assert_eq!(x.key(), y.key());
        }
    }
}
