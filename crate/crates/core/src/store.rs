//! Append-only feedback store.
//!
//! State lives in memory behind a reader/writer lock and, when opened on a
//! path, every mutation is appended to a JSONL event log that is replayed on
//! open. Readers always observe a consistent state; writers are serialized.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::text::normalize_phrase;

pub const IMPUTED_TIMESTAMP_FLAG: &str = "timestamp_imputed";
pub const OTHERS_TOPIC: &str = "others";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("input stream is not valid UTF-8")]
    UndecodableStream,
    #[error("unknown dimension {0:?}")]
    UnknownDimension(String),
    #[error("unknown record id {0:?}")]
    UnknownId(String),
    #[error("label {label:?} is not in the label set of {dimension:?}")]
    LabelNotInSet { dimension: String, label: String },
    #[error("topic round must be 1 or 2, got {0}")]
    InvalidRound(u8),
    #[error("invalid dimension declaration: {0}")]
    InvalidDimension(String),
    #[error("store log: {0}")]
    Io(String),
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Jsonl,
    Csv,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" | "ndjson" => Ok(Format::Jsonl),
            "csv" => Ok(Format::Csv),
            other => Err(format!("unsupported format {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
    #[serde(default)]
    pub topics: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic_round: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub id: String,
    pub text: String,
    pub timestamp: DateTime<Utc>,
    #[serde(default = "undetermined")]
    pub language: String,
    #[serde(default)]
    pub source: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    #[serde(default)]
    pub annotations: AnnotationSet,
}

fn undetermined() -> String {
    "und".into()
}

impl FeedbackRecord {
    pub fn new(id: impl Into<String>, text: impl Into<String>, timestamp: DateTime<Utc>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            timestamp,
            language: undetermined(),
            source: String::new(),
            meta: BTreeMap::new(),
            annotations: AnnotationSet::default(),
        }
    }

    pub fn has_topic(&self, topic: &str) -> bool {
        let wanted = normalize_phrase(topic);
        self.annotations
            .topics
            .iter()
            .any(|t| normalize_phrase(t) == wanted)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "detail")]
pub enum Rejection {
    MissingField(String),
    DuplicateId(String),
    InvalidTimestamp(String),
    Malformed(String),
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rejection::MissingField(field) => write!(f, "MissingField({field})"),
            Rejection::DuplicateId(id) => write!(f, "DuplicateId({id})"),
            Rejection::InvalidTimestamp(ts) => write!(f, "InvalidTimestamp({ts})"),
            Rejection::Malformed(why) => write!(f, "Malformed({why})"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub accepted: usize,
    pub rejected: usize,
    /// (1-based line number, reason)
    pub rejection_reasons: Vec<(usize, Rejection)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Filter {
    All,
    Ids {
        ids: Vec<String>,
    },
    Label {
        dimension: String,
        value: String,
    },
    Topic {
        topic: String,
    },
    Source {
        source: String,
    },
    Language {
        language: String,
    },
    Meta {
        key: String,
        value: String,
    },
    TimeRange {
        #[serde(default)]
        from: Option<DateTime<Utc>>,
        #[serde(default)]
        to: Option<DateTime<Utc>>,
    },
    TextContains {
        needle: String,
    },
    And {
        all: Vec<Filter>,
    },
    Or {
        any: Vec<Filter>,
    },
    Not {
        not: Box<Filter>,
    },
}

impl Filter {
    pub fn topic(t: impl Into<String>) -> Self {
        Filter::Topic { topic: t.into() }
    }

    pub fn label(d: impl Into<String>, v: impl Into<String>) -> Self {
        Filter::Label {
            dimension: d.into(),
            value: v.into(),
        }
    }

    fn check(&self, dims: &BTreeMap<String, BTreeSet<String>>) -> Result<(), StoreError> {
        match self {
            Filter::Label { dimension, .. } if !dims.contains_key(dimension) => {
                Err(StoreError::UnknownDimension(dimension.clone()))
            }
            Filter::And { all: fs } | Filter::Or { any: fs } => {
                fs.iter().try_for_each(|f| f.check(dims))
            }
            Filter::Not { not } => not.check(dims),
            _ => Ok(()),
        }
    }

    fn matches(&self, r: &FeedbackRecord) -> bool {
        match self {
            Filter::All => true,
            Filter::Ids { ids } => ids.contains(&r.id),
            Filter::Label { dimension, value } => r
                .annotations
                .labels
                .get(dimension)
                .is_some_and(|v| *v == normalize_phrase(value)),
            Filter::Topic { topic } => r.has_topic(topic),
            Filter::Source { source } => r.source == *source,
            Filter::Language { language } => r.language.eq_ignore_ascii_case(language),
            Filter::Meta { key, value } => r.meta.get(key) == Some(value),
            Filter::TimeRange { from, to } => {
                from.is_none_or(|f| r.timestamp >= f) && to.is_none_or(|t| r.timestamp < t)
            }
            Filter::TextContains { needle } => {
                r.text.to_lowercase().contains(&needle.to_lowercase())
            }
            Filter::And { all } => all.iter().all(|f| f.matches(r)),
            Filter::Or { any } => any.iter().any(|f| f.matches(r)),
            Filter::Not { not } => !not.matches(r),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderField {
    /// Insertion order.
    #[default]
    Ingest,
    Id,
    Timestamp,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Order {
    pub field: OrderField,
    #[serde(default)]
    pub descending: bool,
}

impl Order {
    pub fn by(field: OrderField) -> Self {
        Self {
            field,
            descending: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub id: String,
    /// Dimension name, or `topics` for topic assignments.
    pub field: String,
    pub old: Option<String>,
    pub new: String,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Event {
    Declare {
        name: String,
        labels: Vec<String>,
    },
    Insert {
        record: FeedbackRecord,
    },
    Annotate {
        id: String,
        dimension: String,
        value: String,
        at: DateTime<Utc>,
    },
    Topics {
        id: String,
        topics: Vec<String>,
        round: u8,
        at: DateTime<Utc>,
    },
}

#[derive(Debug, Default)]
struct State {
    records: Vec<FeedbackRecord>,
    by_id: HashMap<String, usize>,
    dimensions: BTreeMap<String, BTreeSet<String>>,
    audit: Vec<AuditEntry>,
}

impl State {
    fn apply(&mut self, event: Event) -> Result<(), StoreError> {
        match event {
            Event::Declare { name, labels } => {
                self.dimensions.insert(name, labels.into_iter().collect());
            }
            Event::Insert { record } => {
                if self.by_id.contains_key(&record.id) {
                    return Err(StoreError::Io(format!("duplicate id {} in log", record.id)));
                }
                self.by_id.insert(record.id.clone(), self.records.len());
                self.records.push(record);
            }
            Event::Annotate {
                id,
                dimension,
                value,
                at,
            } => {
                let idx = *self
                    .by_id
                    .get(&id)
                    .ok_or_else(|| StoreError::UnknownId(id.clone()))?;
                let old = self.records[idx]
                    .annotations
                    .labels
                    .insert(dimension.clone(), value.clone());
                if old.is_some() {
                    self.audit.push(AuditEntry {
                        id,
                        field: dimension,
                        old,
                        new: value,
                        at,
                    });
                }
            }
            Event::Topics {
                id,
                topics,
                round,
                at,
            } => {
                let idx = *self
                    .by_id
                    .get(&id)
                    .ok_or_else(|| StoreError::UnknownId(id.clone()))?;
                let ann = &mut self.records[idx].annotations;
                let old = (!ann.topics.is_empty()).then(|| ann.topics.join("; "));
                ann.topics = topics;
                ann.topic_round = Some(round);
                if old.is_some() {
                    let new = ann.topics.join("; ");
                    self.audit.push(AuditEntry {
                        id,
                        field: "topics".into(),
                        old,
                        new,
                        at,
                    });
                }
            }
        }
        Ok(())
    }
}

pub struct RecordStore {
    state: RwLock<State>,
    log: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl std::fmt::Debug for RecordStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RecordStore")
            .field("path", &self.path)
            .field("len", &self.len())
            .finish()
    }
}

impl Default for RecordStore {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl RecordStore {
    pub fn in_memory() -> Self {
        Self {
            state: RwLock::new(State::default()),
            log: None,
            path: None,
        }
    }

    /// Opens (or creates) a store backed by an event log at `path`.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let mut state = State::default();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let event: Event = serde_json::from_str(&line)
                    .map_err(|e| StoreError::Io(format!("{}:{}: {e}", path.display(), n + 1)))?;
                state.apply(event)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            state: RwLock::new(state),
            log: Some(Mutex::new(file)),
            path: Some(path),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Appends to the log (if any) and then applies to memory, under the
    /// writer lock.
    fn commit(&self, state: &mut State, events: Vec<Event>) -> Result<(), StoreError> {
        if let Some(log) = &self.log {
            let mut file = log.lock();
            let mut buf = String::new();
            for e in &events {
                buf.push_str(&serde_json::to_string(e).map_err(|e| StoreError::Io(e.to_string()))?);
                buf.push('\n');
            }
            file.write_all(buf.as_bytes())?;
            file.flush()?;
        }
        for e in events {
            state.apply(e)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.state.read().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Declares (or redeclares) a classification dimension and its label set.
    pub fn declare_dimension(&self, name: &str, labels: &[String]) -> Result<(), StoreError> {
        if name.trim().is_empty() {
            return Err(StoreError::InvalidDimension("empty name".into()));
        }
        let normalized: BTreeSet<String> = labels.iter().map(|l| normalize_phrase(l)).collect();
        if normalized.is_empty() || normalized.contains("") {
            return Err(StoreError::InvalidDimension(format!(
                "{name}: empty label set or label"
            )));
        }
        let mut st = self.state.write();
        if st.dimensions.get(name) == Some(&normalized) {
            return Ok(());
        }
        self.commit(
            &mut st,
            vec![Event::Declare {
                name: name.into(),
                labels: normalized.into_iter().collect(),
            }],
        )
    }

    pub fn dimensions(&self) -> BTreeMap<String, BTreeSet<String>> {
        self.state.read().dimensions.clone()
    }

    pub fn ingest(&self, source: impl Read, format: Format) -> Result<IngestReport, StoreError> {
        self.ingest_at(source, format, Utc::now())
    }

    /// As [`ingest`](Self::ingest), with `now` used for rows lacking a
    /// timestamp.
    pub fn ingest_at(
        &self,
        mut source: impl Read,
        format: Format,
        now: DateTime<Utc>,
    ) -> Result<IngestReport, StoreError> {
        let mut bytes = Vec::new();
        source.read_to_end(&mut bytes)?;
        let text = String::from_utf8(bytes).map_err(|_| StoreError::UndecodableStream)?;
        let rows = match format {
            Format::Jsonl => parse_jsonl(&text),
            Format::Csv => parse_csv(&text),
        };

        let mut st = self.state.write();
        let mut report = IngestReport::default();
        let mut seen: BTreeSet<String> = BTreeSet::new();
        let mut events = Vec::new();
        for (line, row) in rows {
            let outcome = row.and_then(|raw| raw.into_record(now)).and_then(|rec| {
                if st.by_id.contains_key(&rec.id) || !seen.insert(rec.id.clone()) {
                    Err(Rejection::DuplicateId(rec.id))
                } else {
                    Ok(rec)
                }
            });
            match outcome {
                Ok(record) => {
                    report.accepted += 1;
                    events.push(Event::Insert { record });
                }
                Err(why) => {
                    report.rejected += 1;
                    report.rejection_reasons.push((line, why));
                }
            }
        }
        self.commit(&mut st, events)?;
        Ok(report)
    }

    /// Inserts already-built records, rejecting duplicates.
    pub fn insert_records(&self, records: Vec<FeedbackRecord>) -> Result<IngestReport, StoreError> {
        let mut st = self.state.write();
        let mut report = IngestReport::default();
        let mut seen = BTreeSet::new();
        let mut events = Vec::new();
        for (i, r) in records.into_iter().enumerate() {
            if r.id.trim().is_empty() {
                report.rejected += 1;
                report
                    .rejection_reasons
                    .push((i + 1, Rejection::MissingField("id".into())));
            } else if r.text.trim().is_empty() {
                report.rejected += 1;
                report
                    .rejection_reasons
                    .push((i + 1, Rejection::MissingField("text".into())));
            } else if st.by_id.contains_key(&r.id) || !seen.insert(r.id.clone()) {
                report.rejected += 1;
                report
                    .rejection_reasons
                    .push((i + 1, Rejection::DuplicateId(r.id)));
            } else {
                report.accepted += 1;
                events.push(Event::Insert { record: r });
            }
        }
        self.commit(&mut st, events)?;
        Ok(report)
    }

    pub fn get(&self, id: &str) -> Option<FeedbackRecord> {
        let st = self.state.read();
        st.by_id.get(id).map(|&i| st.records[i].clone())
    }

    pub fn all(&self) -> Vec<FeedbackRecord> {
        self.state.read().records.clone()
    }

    pub fn query(
        &self,
        filter: &Filter,
        order: Order,
        limit: Option<usize>,
    ) -> Result<Vec<FeedbackRecord>, StoreError> {
        let st = self.state.read();
        filter.check(&st.dimensions)?;
        let mut hits: Vec<(usize, &FeedbackRecord)> = st
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| filter.matches(r))
            .collect();
        hits.sort_by(|(ia, a), (ib, b)| {
            let ord = match order.field {
                OrderField::Ingest => ia.cmp(ib),
                OrderField::Id => a.id.cmp(&b.id),
                OrderField::Timestamp => {
                    a.timestamp.cmp(&b.timestamp).then_with(|| a.id.cmp(&b.id))
                }
            };
            if order.descending {
                ord.reverse()
            } else {
                ord
            }
        });
        Ok(hits
            .into_iter()
            .take(limit.unwrap_or(usize::MAX))
            .map(|(_, r)| r.clone())
            .collect())
    }

    pub fn annotate(
        &self,
        id: &str,
        dimension: &str,
        value: &str,
    ) -> Result<FeedbackRecord, StoreError> {
        self.annotate_many(&[(id.to_string(), value.to_string())], dimension)?;
        Ok(self.get(id).expect("checked above"))
    }

    /// Writes one dimension for many records in a single log append. All
    /// values are validated before anything is written.
    pub fn annotate_many(
        &self,
        pairs: &[(String, String)],
        dimension: &str,
    ) -> Result<(), StoreError> {
        let mut st = self.state.write();
        let labels = st
            .dimensions
            .get(dimension)
            .ok_or_else(|| StoreError::UnknownDimension(dimension.into()))?;
        let at = Utc::now();
        let mut events = Vec::with_capacity(pairs.len());
        for (id, value) in pairs {
            if !st.by_id.contains_key(id) {
                return Err(StoreError::UnknownId(id.clone()));
            }
            let value = normalize_phrase(value);
            if !labels.contains(&value) {
                return Err(StoreError::LabelNotInSet {
                    dimension: dimension.into(),
                    label: value,
                });
            }
            events.push(Event::Annotate {
                id: id.clone(),
                dimension: dimension.into(),
                value,
                at,
            });
        }
        self.commit(&mut st, events)
    }

    pub fn set_topics(
        &self,
        id: &str,
        topics: &[String],
        round: u8,
    ) -> Result<FeedbackRecord, StoreError> {
        self.set_topics_many(&[(id.to_string(), topics.to_vec())], round)?;
        Ok(self.get(id).expect("checked above"))
    }

    pub fn set_topics_many(
        &self,
        assignments: &[(String, Vec<String>)],
        round: u8,
    ) -> Result<(), StoreError> {
        if !(1..=2).contains(&round) {
            return Err(StoreError::InvalidRound(round));
        }
        let mut st = self.state.write();
        let at = Utc::now();
        let mut events = Vec::with_capacity(assignments.len());
        for (id, topics) in assignments {
            if !st.by_id.contains_key(id) {
                return Err(StoreError::UnknownId(id.clone()));
            }
            let mut seen = BTreeSet::new();
            let topics: Vec<String> = topics
                .iter()
                .map(|t| t.trim().to_string())
                .filter(|t| !t.is_empty() && seen.insert(normalize_phrase(t)))
                .collect();
            events.push(Event::Topics {
                id: id.clone(),
                topics,
                round,
                at,
            });
        }
        self.commit(&mut st, events)
    }

    pub fn audit_log(&self) -> Vec<AuditEntry> {
        self.state.read().audit.clone()
    }

    /// Writes matching records. CSV carries scalar fields, flattened meta,
    /// one `label.<dimension>` column per declared dimension, `topics`
    /// (joined with "; ") and `topic_round`. JSONL carries whole records.
    pub fn export(
        &self,
        filter: &Filter,
        format: Format,
        out: impl Write,
    ) -> Result<usize, StoreError> {
        let records = self.query(filter, Order::default(), None)?;
        let dims: Vec<String> = self.state.read().dimensions.keys().cloned().collect();
        match format {
            Format::Jsonl => {
                let mut out = out;
                for r in &records {
                    serde_json::to_writer(&mut out, r)
                        .map_err(|e| StoreError::Io(e.to_string()))?;
                    out.write_all(b"\n")?;
                }
            }
            Format::Csv => write_csv(&records, &dims, out)?,
        }
        Ok(records.len())
    }

    pub fn export_to_path(
        &self,
        filter: &Filter,
        format: Format,
        path: &Path,
    ) -> Result<usize, StoreError> {
        let file = File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        let n = self.export(filter, format, &mut w)?;
        w.flush()?;
        Ok(n)
    }

    /// Compact description of the data for planning prompts.
    pub fn schema_summary(&self) -> SchemaSummary {
        let st = self.state.read();
        let mut meta_keys = BTreeSet::new();
        let mut topic_counts: BTreeMap<String, usize> = BTreeMap::new();
        for r in &st.records {
            meta_keys.extend(r.meta.keys().cloned());
            for t in &r.annotations.topics {
                *topic_counts.entry(t.clone()).or_default() += 1;
            }
        }
        let mut topics: Vec<(String, usize)> = topic_counts.into_iter().collect();
        topics.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        topics.truncate(20);
        let mut columns: Vec<String> = ["id", "text", "timestamp", "language", "source"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        columns.extend(meta_keys.iter().map(|k| format!("meta.{k}")));
        columns.extend(st.dimensions.keys().map(|d| format!("label.{d}")));
        columns.push("topics".into());
        columns.push("topic_round".into());
        SchemaSummary {
            records: st.records.len(),
            columns,
            dimensions: st
                .dimensions
                .iter()
                .map(|(k, v)| (k.clone(), v.iter().cloned().collect()))
                .collect(),
            top_topics: topics,
            first_timestamp: st.records.iter().map(|r| r.timestamp).min(),
            last_timestamp: st.records.iter().map(|r| r.timestamp).max(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaSummary {
    pub records: usize,
    pub columns: Vec<String>,
    pub dimensions: BTreeMap<String, Vec<String>>,
    pub top_topics: Vec<(String, usize)>,
    pub first_timestamp: Option<DateTime<Utc>>,
    pub last_timestamp: Option<DateTime<Utc>>,
}

impl SchemaSummary {
    pub fn render(&self) -> String {
        let mut s = format!(
            "Table `df` with {} rows.\nColumns: {}\n",
            self.records,
            self.columns.join(", ")
        );
        for (d, labels) in &self.dimensions {
            s.push_str(&format!("Dimension {d}: labels {}\n", labels.join(", ")));
        }
        if !self.top_topics.is_empty() {
            let t: Vec<String> = self
                .top_topics
                .iter()
                .map(|(t, n)| format!("{t} ({n})"))
                .collect();
            s.push_str(&format!("Frequent topics: {}\n", t.join(", ")));
        }
        if let (Some(a), Some(b)) = (self.first_timestamp, self.last_timestamp) {
            s.push_str(&format!(
                "Time range: {} to {}\n",
                a.to_rfc3339_opts(SecondsFormat::Secs, true),
                b.to_rfc3339_opts(SecondsFormat::Secs, true)
            ));
        }
        s
    }
}

/// A row before validation.
#[derive(Debug, Default)]
struct RawRow {
    id: Option<String>,
    text: Option<String>,
    timestamp: Option<String>,
    language: Option<String>,
    source: Option<String>,
    meta: BTreeMap<String, String>,
}

impl RawRow {
    fn into_record(self, now: DateTime<Utc>) -> Result<FeedbackRecord, Rejection> {
        let id = self
            .id
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Rejection::MissingField("id".into()))?;
        let text = self
            .text
            .filter(|s| !s.trim().is_empty())
            .ok_or_else(|| Rejection::MissingField("text".into()))?;
        let mut meta = self.meta;
        let timestamp = match self.timestamp.filter(|s| !s.trim().is_empty()) {
            Some(ts) => DateTime::parse_from_rfc3339(ts.trim())
                .map(|t| t.with_timezone(&Utc))
                .map_err(|_| Rejection::InvalidTimestamp(ts))?,
            None => {
                meta.insert(IMPUTED_TIMESTAMP_FLAG.into(), "true".into());
                now
            }
        };
        Ok(FeedbackRecord {
            id,
            text,
            timestamp,
            language: self
                .language
                .filter(|s| !s.trim().is_empty())
                .unwrap_or_else(undetermined),
            source: self.source.unwrap_or_default(),
            meta,
            annotations: AnnotationSet::default(),
        })
    }
}

fn scalar_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn parse_jsonl(text: &str) -> Vec<(usize, Result<RawRow, Rejection>)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let row = serde_json::from_str::<Value>(line)
                .map_err(|e| Rejection::Malformed(e.to_string()))
                .and_then(|v| match v {
                    Value::Object(map) => {
                        let mut meta = BTreeMap::new();
                        if let Some(m) = map.get("meta") {
                            match m {
                                Value::Object(m) => {
                                    for (k, v) in m {
                                        let s = scalar_string(v).ok_or_else(|| {
                                            Rejection::Malformed(format!(
                                                "meta.{k} is not a scalar"
                                            ))
                                        })?;
                                        meta.insert(k.clone(), s);
                                    }
                                }
                                Value::Null => {}
                                _ => {
                                    return Err(Rejection::Malformed(
                                        "meta is not an object".into(),
                                    ))
                                }
                            }
                        }
                        let get = |k: &str| map.get(k).and_then(scalar_string);
                        Ok(RawRow {
                            id: get("id"),
                            text: map.get("text").and_then(|v| v.as_str().map(str::to_string)),
                            timestamp: get("timestamp"),
                            language: get("language"),
                            source: get("source"),
                            meta,
                        })
                    }
                    _ => Err(Rejection::Malformed("row is not an object".into())),
                });
            (i + 1, row)
        })
        .collect()
}

fn parse_csv(text: &str) -> Vec<(usize, Result<RawRow, Rejection>)> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(false)
        .from_reader(text.as_bytes());
    let headers = match reader.headers() {
        Ok(h) => h.clone(),
        Err(e) => return vec![(1, Err(Rejection::Malformed(e.to_string())))],
    };
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = rec
            .as_ref()
            .ok()
            .and_then(|r| r.position())
            .map_or(i + 2, |p| p.line() as usize);
        let row = rec
            .map_err(|e| Rejection::Malformed(e.to_string()))
            .map(|rec| {
                let mut row = RawRow::default();
                for (h, v) in headers.iter().zip(rec.iter()) {
                    let v = v.to_string();
                    match h {
                        "id" => row.id = Some(v),
                        "text" => row.text = Some(v),
                        "timestamp" => row.timestamp = Some(v),
                        "language" => row.language = Some(v),
                        "source" => row.source = Some(v),
                        other => {
                            if let Some(key) = other.strip_prefix("meta.") {
                                if !v.is_empty() {
                                    row.meta.insert(key.to_string(), v);
                                }
                            }
                        }
                    }
                }
                row
            });
        out.push((line, row));
    }
    out
}

fn write_csv(
    records: &[FeedbackRecord],
    dims: &[String],
    out: impl Write,
) -> Result<(), StoreError> {
    let meta_keys: BTreeSet<&String> = records.iter().flat_map(|r| r.meta.keys()).collect();
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| StoreError::Io(e.to_string());
    let mut header: Vec<String> = ["id", "text", "timestamp", "language", "source"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(meta_keys.iter().map(|k| format!("meta.{k}")));
    header.extend(dims.iter().map(|d| format!("label.{d}")));
    header.push("topics".into());
    header.push("topic_round".into());
    w.write_record(&header).map_err(csv_err)?;
    for r in records {
        let mut row = vec![
            r.id.clone(),
            r.text.clone(),
            r.timestamp.to_rfc3339_opts(SecondsFormat::AutoSi, true),
            r.language.clone(),
            r.source.clone(),
        ];
        row.extend(
            meta_keys
                .iter()
                .map(|k| r.meta.get(*k).cloned().unwrap_or_default()),
        );
        row.extend(
            dims.iter()
                .map(|d| r.annotations.labels.get(d).cloned().unwrap_or_default()),
        );
        row.push(r.annotations.topics.join("; "));
        row.push(
            r.annotations
                .topic_round
                .map(|n| n.to_string())
                .unwrap_or_default(),
        );
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 4, 1, 12, 0, 0).unwrap()
    }

    fn jsonl(rows: &[&str]) -> Vec<u8> {
        rows.join("\n").into_bytes()
    }

    #[test]
    fn ingest_counts_and_rejections() {
        let store = RecordStore::in_memory();
        let data = jsonl(&[
            r#"{"id":"a1","text":"crash on start","timestamp":"2024-04-01T10:00:00Z"}"#,
            r#"{"id":"a2","text":"love it","timestamp":"2024-04-02T10:00:00+02:00","meta":{"country":"US","stars":5}}"#,
            r#"{"id":"a3","text":"slow"}"#,
        ]);
        let report = store
            .ingest_at(data.as_slice(), Format::Jsonl, t0())
            .unwrap();
        assert_eq!((report.accepted, report.rejected), (3, 0));
        let a2 = store.get("a2").unwrap();
        assert_eq!(
            a2.timestamp,
            Utc.with_ymd_and_hms(2024, 4, 2, 8, 0, 0).unwrap()
        );
        assert_eq!(a2.meta["stars"], "5");
        assert_eq!(a2.language, "und");
        let a3 = store.get("a3").unwrap();
        assert_eq!(a3.timestamp, t0());
        assert_eq!(a3.meta[IMPUTED_TIMESTAMP_FLAG], "true");

        let bad = jsonl(&[
            r#"{"id":"b1","timestamp":"2024-04-01T10:00:00Z"}"#,
            r#"{"id":"a1","text":"again"}"#,
            r#"{"text":"no id"}"#,
            r#"{"id":"b2","text":"   "}"#,
            r#"not json"#,
            r#"{"id":"b3","text":"bad ts","timestamp":"yesterday"}"#,
        ]);
        let report = store
            .ingest_at(bad.as_slice(), Format::Jsonl, t0())
            .unwrap();
        assert_eq!((report.accepted, report.rejected), (0, 6));
        let reasons: Vec<String> = report
            .rejection_reasons
            .iter()
            .map(|(_, r)| r.to_string())
            .collect();
        assert_eq!(reasons[0], "MissingField(text)");
        assert_eq!(reasons[1], "DuplicateId(a1)");
        assert_eq!(reasons[2], "MissingField(id)");
        assert_eq!(reasons[3], "MissingField(text)");
        assert!(reasons[4].starts_with("Malformed"));
        assert_eq!(reasons[5], "InvalidTimestamp(yesterday)");
        assert_eq!(report.rejection_reasons[1].0, 2);
    }

    #[test]
    fn duplicate_within_one_batch() {
        let store = RecordStore::in_memory();
        let data = jsonl(&[r#"{"id":"a1","text":"x"}"#, r#"{"id":"a1","text":"y"}"#]);
        let report = store
            .ingest_at(data.as_slice(), Format::Jsonl, t0())
            .unwrap();
        assert_eq!((report.accepted, report.rejected), (1, 1));
        assert_eq!(store.get("a1").unwrap().text, "x");
    }

    #[test]
    fn undecodable_stream_fails_whole_ingest() {
        let store = RecordStore::in_memory();
        let err = store
            .ingest(&[0xff, 0xfe, b'{'][..], Format::Jsonl)
            .unwrap_err();
        assert!(matches!(err, StoreError::UndecodableStream));
        assert!(store.is_empty());
    }

    #[test]
    fn csv_ingest_flattens_meta() {
        let store = RecordStore::in_memory();
        let csv = "id,text,timestamp,meta.country,extra\nc1,\"hello, world\",2024-04-01T00:00:00Z,US,zzz\nc2,,2024-04-01T00:00:00Z,FR,\n";
        let report = store.ingest_at(csv.as_bytes(), Format::Csv, t0()).unwrap();
        assert_eq!((report.accepted, report.rejected), (1, 1));
        assert_eq!(
            report.rejection_reasons[0],
            (3, Rejection::MissingField("text".into()))
        );
        let c1 = store.get("c1").unwrap();
        assert_eq!(c1.text, "hello, world");
        assert_eq!(c1.meta.get("country").map(String::as_str), Some("US"));
        assert!(!c1.meta.contains_key("extra"));
    }

    fn seeded() -> RecordStore {
        let store = RecordStore::in_memory();
        let recs = (0..5)
            .map(|i| {
                FeedbackRecord::new(
                    format!("r{i}"),
                    format!("text {i}"),
                    t0() - chrono::Duration::hours(i),
                )
            })
            .collect();
        store.insert_records(recs).unwrap();
        store
            .declare_dimension(
                "sentiment",
                &["positive".into(), "neutral".into(), "negative".into()],
            )
            .unwrap();
        store
    }

    #[test]
    fn query_filters_and_orders() {
        let store = seeded();
        store.set_topics("r1", &["bug".into()], 1).unwrap();
        store
            .set_topics("r3", &["Bug".into(), "ui".into()], 1)
            .unwrap();
        let hits = store
            .query(&Filter::topic("bug"), Order::default(), None)
            .unwrap();
        assert_eq!(
            hits.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(),
            ["r1", "r3"]
        );

        let chrono_order = store
            .query(&Filter::All, Order::by(OrderField::Timestamp), None)
            .unwrap();
        let ids: Vec<_> = chrono_order.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["r4", "r3", "r2", "r1", "r0"]);
        assert!(chrono_order
            .windows(2)
            .all(|w| w[0].timestamp <= w[1].timestamp));

        let limited = store
            .query(
                &Filter::All,
                Order {
                    field: OrderField::Id,
                    descending: true,
                },
                Some(2),
            )
            .unwrap();
        assert_eq!(
            limited.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(),
            ["r4", "r3"]
        );

        assert!(matches!(
            store.query(&Filter::label("foo", "x"), Order::default(), None),
            Err(StoreError::UnknownDimension(d)) if d == "foo"
        ));
    }

    #[test]
    fn annotate_and_audit() {
        let store = seeded();
        let r = store.annotate("r1", "sentiment", "Negative").unwrap();
        assert_eq!(r.annotations.labels["sentiment"], "negative");
        let hits = store
            .query(
                &Filter::label("sentiment", "negative"),
                Order::default(),
                None,
            )
            .unwrap();
        assert_eq!(hits.len(), 1);
        store.annotate("r1", "sentiment", "positive").unwrap();
        let audit = store.audit_log();
        assert_eq!(audit.len(), 1);
        assert_eq!(audit[0].old.as_deref(), Some("negative"));
        assert_eq!(audit[0].new, "positive");

        assert!(matches!(
            store.annotate("zz", "sentiment", "positive"),
            Err(StoreError::UnknownId(_))
        ));
        assert!(matches!(
            store.annotate("r1", "sentiment", "meh"),
            Err(StoreError::LabelNotInSet { .. })
        ));
        assert!(matches!(
            store.annotate("r1", "nope", "x"),
            Err(StoreError::UnknownDimension(_))
        ));
    }

    #[test]
    fn topics_dedupe_and_keep_labels() {
        let store = seeded();
        store.annotate("r0", "sentiment", "neutral").unwrap();
        let r = store
            .set_topics(
                "r0",
                &[
                    "feature request".into(),
                    "reliability".into(),
                    "Feature Request".into(),
                ],
                1,
            )
            .unwrap();
        assert_eq!(r.annotations.topics, ["feature request", "reliability"]);
        assert_eq!(r.annotations.topic_round, Some(1));
        assert_eq!(r.annotations.labels["sentiment"], "neutral");
        assert!(matches!(
            store.set_topics("r0", &[], 3),
            Err(StoreError::InvalidRound(3))
        ));
    }

    #[test]
    fn log_replay_restores_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.log");
        {
            let store = RecordStore::open(&path).unwrap();
            store
                .insert_records(vec![FeedbackRecord::new("a", "x", t0())])
                .unwrap();
            store
                .declare_dimension("sentiment", &["positive".into(), "negative".into()])
                .unwrap();
            store.annotate("a", "sentiment", "positive").unwrap();
            store.set_topics("a", &["bug".into()], 2).unwrap();
        }
        let store = RecordStore::open(&path).unwrap();
        let a = store.get("a").unwrap();
        assert_eq!(a.annotations.labels["sentiment"], "positive");
        assert_eq!(a.annotations.topics, ["bug"]);
        assert_eq!(a.annotations.topic_round, Some(2));
    }

    #[test]
    fn csv_export_header_only_when_empty() {
        let store = seeded();
        let mut buf = Vec::new();
        let n = store
            .export(&Filter::topic("nothing"), Format::Csv, &mut buf)
            .unwrap();
        assert_eq!(n, 0);
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "id,text,timestamp,language,source,label.sentiment,topics,topic_round\n"
        );
    }

    #[test]
    fn export_with_topic_filter() {
        let store = seeded();
        store.set_topics("r2", &["ui".into()], 1).unwrap();
        let mut buf = Vec::new();
        store
            .export(&Filter::topic("ui"), Format::Csv, &mut buf)
            .unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().nth(1).unwrap().starts_with("r2,"));
    }
}
