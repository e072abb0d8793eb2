//! Event-log ingestion: CSV loading under a declared attribute schema,
//! per-case trace assembly, and synthetic balanced / imbalanced logs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CASE_ID: &str = "case_id";
pub const START_TS: &str = "start_ts";
pub const COMPLETE_TS: &str = "complete_ts";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Node,
    Graph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Categorical,
    Numeric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Key,
    Universal,
    Specific,
}

/// "Applies when universal attribute `attribute` has a value in `values`."
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Applicability {
    pub attribute: String,
    pub values: Vec<String>,
}

impl Applicability {
    pub fn holds(&self, attrs: &BTreeMap<String, String>) -> bool {
        attrs
            .get(&self.attribute)
            .is_some_and(|v| self.values.iter().any(|a| a == v))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub name: String,
    pub level: Level,
    pub kind: Kind,
    #[serde(default = "default_scope")]
    pub scope: Scope,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub applies_when: Option<Applicability>,
}

fn default_scope() -> Scope {
    Scope::Universal
}

impl AttributeSchema {
    pub fn key(name: &str) -> Self {
        Self { name: name.into(), level: Level::Node, kind: Kind::Categorical, scope: Scope::Key, applies_when: None }
    }

    pub fn node(name: &str, kind: Kind) -> Self {
        Self { name: name.into(), level: Level::Node, kind, scope: Scope::Universal, applies_when: None }
    }

    pub fn specific(name: &str, kind: Kind, attribute: &str, values: &[&str]) -> Self {
        Self {
            name: name.into(),
            level: Level::Node,
            kind,
            scope: Scope::Specific,
            applies_when: Some(Applicability {
                attribute: attribute.into(),
                values: values.iter().map(|s| s.to_string()).collect(),
            }),
        }
    }

    pub fn graph(name: &str, kind: Kind) -> Self {
        Self { name: name.into(), level: Level::Graph, kind, scope: Scope::Universal, applies_when: None }
    }
}

/// Check the structural rules of a schema and return the key attribute name.
pub fn validate_schema(schema: &[AttributeSchema]) -> Result<&str> {
    let keys: Vec<_> = schema.iter().filter(|a| a.scope == Scope::Key).collect();
    if keys.len() != 1 {
        return Err(Error::Schema(format!("expected exactly one key attribute, found {}", keys.len())));
    }
    let key = keys[0];
    if key.level != Level::Node || key.kind != Kind::Categorical {
        return Err(Error::Schema(format!("key attribute `{}` must be node-level categorical", key.name)));
    }
    let mut seen = BTreeSet::new();
    for a in schema {
        if !seen.insert(a.name.as_str()) {
            return Err(Error::Schema(format!("attribute `{}` declared twice", a.name)));
        }
        if [CASE_ID, START_TS, COMPLETE_TS].contains(&a.name.as_str()) {
            return Err(Error::Schema(format!("attribute `{}` collides with a reserved column", a.name)));
        }
        match (a.scope, &a.applies_when) {
            (Scope::Specific, None) => {
                return Err(Error::Schema(format!("specific attribute `{}` has no applicability predicate", a.name)))
            }
            (Scope::Specific, Some(p)) => {
                let target = schema.iter().find(|b| b.name == p.attribute);
                match target {
                    Some(b) if b.level == Level::Node && b.scope == Scope::Universal => {}
                    _ => {
                        return Err(Error::Schema(format!(
                            "predicate of `{}` must reference a universal node attribute, got `{}`",
                            a.name, p.attribute
                        )))
                    }
                }
                if a.level != Level::Node {
                    return Err(Error::Schema(format!("specific attribute `{}` must be node-level", a.name)));
                }
            }
            (_, Some(_)) => {
                return Err(Error::Schema(format!("only specific attributes take a predicate (`{}`)", a.name)))
            }
            _ => {}
        }
        if a.level == Level::Graph && a.scope != Scope::Universal {
            return Err(Error::Schema(format!("graph attribute `{}` must be universal", a.name)));
        }
    }
    Ok(&key.name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub case_id: String,
    pub activity: String,
    pub start_ts: i64,
    pub complete_ts: i64,
    pub attrs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseTrace {
    pub case_id: String,
    pub events: Vec<EventRecord>,
    pub graph_attrs: BTreeMap<String, String>,
    pub label: usize,
}

impl CaseTrace {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: Vec<AttributeSchema>,
    pub traces: Vec<CaseTrace>,
    pub class_names: Vec<String>,
    /// Non-fatal issues found while loading (conflicting graph attributes).
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn key_attribute(&self) -> &str {
        self.schema
            .iter()
            .find(|a| a.scope == Scope::Key)
            .map(|a| a.name.as_str())
            .unwrap_or("activity")
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for t in &self.traces {
            counts[t.label] += 1;
        }
        counts
    }

    pub fn has_durations(&self) -> bool {
        self.traces.iter().flat_map(|t| &t.events).any(|e| e.complete_ts > e.start_ts)
    }

    /// Full invariant check: schema rules, label range, event ordering, and
    /// satisfiability of every specific-attribute predicate.
    pub fn validate(&self) -> Result<()> {
        validate_schema(&self.schema)?;
        if self.class_names.len() < 2 {
            return Err(Error::Data("a dataset needs at least 2 classes".into()));
        }
        let graph_names: BTreeSet<_> =
            self.schema.iter().filter(|a| a.level == Level::Graph).map(|a| a.name.as_str()).collect();
        for t in &self.traces {
            if t.events.is_empty() {
                return Err(Error::Data(format!("case `{}` has no events", t.case_id)));
            }
            if t.label >= self.class_names.len() {
                return Err(Error::Data(format!("case `{}` label {} out of range", t.case_id, t.label)));
            }
            if t.events.windows(2).any(|w| w[0].start_ts > w[1].start_ts) {
                return Err(Error::Data(format!("case `{}` events not sorted", t.case_id)));
            }
            if t.events.iter().any(|e| e.complete_ts < e.start_ts || e.activity.is_empty()) {
                return Err(Error::Data(format!("case `{}` has an invalid event", t.case_id)));
            }
            let keys: BTreeSet<_> = t.graph_attrs.keys().map(String::as_str).collect();
            if keys != graph_names {
                return Err(Error::Data(format!("case `{}` graph attributes do not match schema", t.case_id)));
            }
        }
        for a in self.schema.iter().filter(|a| a.scope == Scope::Specific) {
            let pred = a.applies_when.as_ref().expect("validated");
            let satisfiable = self.traces.iter().flat_map(|t| &t.events).any(|e| pred.holds(&e.attrs));
            if !satisfiable && !self.traces.is_empty() {
                return Err(Error::Data(format!("predicate of `{}` never holds", a.name)));
            }
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            traces: indices.iter().map(|&i| self.traces[i].clone()).collect(),
            class_names: self.class_names.clone(),
            warnings: Vec::new(),
        }
    }
}

/// Integer seconds, or an ISO-8601 / RFC 3339 timestamp (naive times are UTC).
pub fn parse_timestamp(raw: &str) -> Option<i64> {
    let s = raw.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    None
}

pub fn load_csv(path: impl AsRef<Path>, schema: &[AttributeSchema], label_column: &str) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, schema, label_column)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &[AttributeSchema], label_column: &str) -> Result<Dataset> {
    let key = validate_schema(schema)?.to_string();
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let case_col = col(CASE_ID)?;
    let key_col = col(&key)?;
    let start_col = col(START_TS)?;
    let complete_col = col(COMPLETE_TS)?;
    let label_col = col(label_column)?;
    let mut node_cols = Vec::new();
    let mut graph_cols = Vec::new();
    for a in schema.iter().filter(|a| a.scope != Scope::Key) {
        let c = col(&a.name)?;
        match a.level {
            Level::Node => node_cols.push((a.name.clone(), c)),
            Level::Graph => graph_cols.push((a.name.clone(), c)),
        }
    }

    struct Pending {
        events: Vec<(usize, EventRecord)>,
        graph_attrs: BTreeMap<String, String>,
        label: String,
    }
    let mut order: Vec<String> = Vec::new();
    let mut cases: HashMap<String, Pending> = HashMap::new();
    let mut warnings = Vec::new();

    for (row_idx, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(row_idx + 2, |p| p.line() as usize);
        let field = |c: usize| rec.get(c).unwrap_or("").to_string();
        let case_id = field(case_col);
        if case_id.is_empty() {
            return Err(Error::Row { line, msg: "empty case id".into() });
        }
        let activity = field(key_col);
        if activity.trim().is_empty() {
            return Err(Error::Row { line, msg: "empty activity".into() });
        }
        let start_ts = parse_timestamp(&field(start_col))
            .ok_or_else(|| Error::Row { line, msg: format!("unparsable start timestamp `{}`", field(start_col)) })?;
        let complete_ts = parse_timestamp(&field(complete_col)).ok_or_else(|| Error::Row {
            line,
            msg: format!("unparsable complete timestamp `{}`", field(complete_col)),
        })?;
        if complete_ts < start_ts {
            return Err(Error::Row { line, msg: "complete timestamp precedes start".into() });
        }
        let attrs = node_cols.iter().map(|(n, c)| (n.clone(), field(*c))).collect();
        let graph_attrs: BTreeMap<String, String> = graph_cols.iter().map(|(n, c)| (n.clone(), field(*c))).collect();
        let label = field(label_col);
        let event = EventRecord { case_id: case_id.clone(), activity, start_ts, complete_ts, attrs };
        match cases.get_mut(&case_id) {
            Some(p) => {
                if p.graph_attrs != graph_attrs || p.label != label {
                    warnings.push(format!("case `{case_id}` line {line}: case-level values differ from first row"));
                }
                p.events.push((row_idx, event));
            }
            None => {
                order.push(case_id.clone());
                cases.insert(case_id, Pending { events: vec![(row_idx, event)], graph_attrs, label });
            }
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }

    let class_names: Vec<String> =
        cases.values().map(|p| p.label.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    if class_names.len() < 2 {
        return Err(Error::Data(format!("label column `{label_column}` has fewer than 2 classes")));
    }
    let mut traces = Vec::with_capacity(order.len());
    for id in order {
        let mut p = cases.remove(&id).expect("case recorded");
        if p.events.is_empty() {
            return Err(Error::Data(format!("case `{id}` has zero events")));
        }
        p.events.sort_by_key(|(i, e)| (e.start_ts, *i));
        let label = class_names.binary_search(&p.label).expect("label collected");
        traces.push(CaseTrace {
            case_id: id,
            events: p.events.into_iter().map(|(_, e)| e).collect(),
            graph_attrs: p.graph_attrs,
            label,
        });
    }
    Ok(Dataset { schema: schema.to_vec(), traces, class_names, warnings })
}

pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>, label_column: &str) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_csv_to(dataset, file, label_column)
}

pub fn write_csv_to<W: std::io::Write>(dataset: &Dataset, writer: W, label_column: &str) -> Result<()> {
    let key = dataset.key_attribute().to_string();
    let others: Vec<&AttributeSchema> = dataset.schema.iter().filter(|a| a.scope != Scope::Key).collect();
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![CASE_ID.to_string(), key, START_TS.into(), COMPLETE_TS.into(), label_column.into()];
    header.extend(others.iter().map(|a| a.name.clone()));
    w.write_record(&header)?;
    for t in &dataset.traces {
        for e in &t.events {
            let mut row = vec![
                t.case_id.clone(),
                e.activity.clone(),
                e.start_ts.to_string(),
                e.complete_ts.to_string(),
                dataset.class_names[t.label].clone(),
            ];
            for a in &others {
                let v = match a.level {
                    Level::Node => e.attrs.get(&a.name),
                    Level::Graph => t.graph_attrs.get(&a.name),
                };
                row.push(v.cloned().unwrap_or_default());
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

const BASE_TS: i64 = 1_325_376_000; // 2012-01-01T00:00:00Z

const LOAN_STEPS: [&str; 8] = [
    "A_SUBMITTED application",
    "A_PARTLYSUBMITTED application",
    "A_PREACCEPTED application",
    "W_Completeren aanvraag",
    "O_SELECTED offer",
    "O_CREATED offer",
    "O_SENT offer",
    "W_Nabellen offertes",
];

pub fn balanced_schema() -> Vec<AttributeSchema> {
    vec![
        AttributeSchema::key("activity"),
        AttributeSchema::node("resource", Kind::Categorical),
        AttributeSchema::node("channel", Kind::Categorical),
        AttributeSchema::graph("amount_req", Kind::Numeric),
    ]
}

fn outcome_names(n_classes: usize) -> Vec<String> {
    const NAMED: [&str; 3] = ["approved", "declined", "cancelled"];
    let mut names: Vec<String> = (0..n_classes)
        .map(|k| if n_classes <= 3 { NAMED[k].to_string() } else { format!("outcome_{k:02}") })
        .collect();
    names.sort();
    names
}

/// Loan-application style log in which every class has exactly
/// `n_per_class` traces and the outcome is fixed by the final activity.
/// All events are instantaneous.
pub fn synth_balanced(n_per_class: usize, n_classes: usize, seed: u64) -> Result<Dataset> {
    if n_per_class < 1 || n_classes < 2 {
        return Err(Error::Config("synth_balanced needs n_per_class >= 1 and n_classes >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class_names = outcome_names(n_classes);
    let mut labels: Vec<usize> = (0..n_classes).flat_map(|c| std::iter::repeat(c).take(n_per_class)).collect();
    labels.shuffle(&mut rng);
    let resources = ["r_112", "r_10862", "r_10913", "r_11049", "r_11201"];
    let channels = ["web", "phone", "branch"];

    let traces = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let case_id = format!("case_{i:05}");
            let len = rng.gen_range(4..=8);
            let channel = channels[rng.gen_range(0..channels.len())];
            let mut ts = BASE_TS + rng.gen_range(0..30 * 86_400);
            let mut events = Vec::with_capacity(len);
            for k in 0..len {
                let activity = if k + 1 == len {
                    format!("A_{} application", class_names[label].to_uppercase())
                } else {
                    LOAN_STEPS[rng.gen_range(0..LOAN_STEPS.len())].to_string()
                };
                let mut attrs = BTreeMap::new();
                attrs.insert("resource".into(), resources[rng.gen_range(0..resources.len())].into());
                attrs.insert("channel".into(), channel.into());
                events.push(EventRecord { case_id: case_id.clone(), activity, start_ts: ts, complete_ts: ts, attrs });
                // a quarter of the transitions are simultaneous
                if rng.gen_bool(0.75) {
                    ts += rng.gen_range(1..6 * 3600);
                }
            }
            let mut graph_attrs = BTreeMap::new();
            graph_attrs.insert("amount_req".into(), (rng.gen_range(10..500) * 100).to_string());
            CaseTrace { case_id, events, graph_attrs, label }
        })
        .collect();
    Ok(Dataset { schema: balanced_schema(), traces, class_names, warnings: Vec::new() })
}

/// Six-outcome ratios of a 428-case validation split with a 36:1 majority to
/// minority ratio.
pub const PATIENT_RATIOS: [f64; 6] = [0.4074, 0.2430, 0.2150, 0.0747, 0.0487, 0.0112];

pub fn patients_schema() -> Vec<AttributeSchema> {
    vec![
        AttributeSchema::key("activity"),
        AttributeSchema::node("department", Kind::Categorical),
        AttributeSchema::specific("specialist", Kind::Categorical, "department", &["surgery"]),
        AttributeSchema::node("cost", Kind::Numeric),
        AttributeSchema::node("staff", Kind::Numeric),
        AttributeSchema::node("queue", Kind::Numeric),
        AttributeSchema::graph("age", Kind::Numeric),
        AttributeSchema::graph("bmi", Kind::Numeric),
        AttributeSchema::graph("prior_visits", Kind::Numeric),
        AttributeSchema::graph("insurance", Kind::Categorical),
    ]
}

/// Class counts by largest-remainder rounding (ties go to the lower index).
pub fn largest_remainder(total: usize, ratios: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

const INSURANCE: [&str; 3] = ["public", "private", "none"];
const SPECIALISTS: [&str; 3] = ["ortho", "cardio", "neuro"];
const WARD_STEPS: [(&str, &str); 6] = [
    ("draw blood", "laboratory"),
    ("take xray", "radiology"),
    ("take mri", "radiology"),
    ("visit ward", "ward"),
    ("check vitals", "ward"),
    ("review chart", "ward"),
];

/// Hospital-style log with skewed outcomes. The outcome of a case is a
/// function of its insurance (graph level) and whether it passes through
/// surgery (node level); every trace ends with the same discharge activity.
pub fn synth_imbalanced(total: usize, ratios: &[f64], seed: u64) -> Result<Dataset> {
    if ratios.len() < 2 {
        return Err(Error::Config("need at least 2 class ratios".into()));
    }
    if ratios.iter().any(|&r| r <= 0.0) {
        return Err(Error::Config("every class ratio must be positive".into()));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("class ratios sum to {sum}, expected 1")));
    }
    let n_classes = ratios.len();
    let counts = largest_remainder(total, ratios);
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::Config(format!("total {total} too small to realize every class")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class_names: Vec<String> = (0..n_classes).map(|k| format!("outcome_{k}")).collect();
    let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat(c).take(n)).collect();
    labels.shuffle(&mut rng);

    let traces = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            // outcome code: (insurance, surgery) pattern
            let insurance = INSURANCE[label % 3];
            let surgery = (label / 3) % 2 == 1;
            let case_id = format!("patient_{i:05}");
            let mut steps: Vec<(String, &str)> = vec![
                ("register patient".into(), "triage"),
                ("triage assessment".into(), "triage"),
            ];
            let middle = rng.gen_range(1..=4);
            for _ in 0..middle {
                let (a, d) = WARD_STEPS[rng.gen_range(0..WARD_STEPS.len())];
                steps.push((a.into(), d));
            }
            if surgery {
                let at = rng.gen_range(2..=steps.len());
                steps.insert(at, ("perform surgery".into(), "surgery"));
                if rng.gen_bool(0.5) {
                    steps.insert(at + 1, ("surgery followup".into(), "surgery"));
                }
            }
            steps.push(("discharge patient".into(), "ward"));

            let mut ts = BASE_TS + rng.gen_range(0..365 * 86_400);
            let events = steps
                .into_iter()
                .map(|(activity, dept)| {
                    let duration: i64 = if rng.gen_bool(0.35) {
                        rng.gen_range(1..300)
                    } else {
                        (300.0 * (rng.gen::<f64>() * 4.0).exp()) as i64
                    };
                    let mut attrs = BTreeMap::new();
                    attrs.insert("department".into(), dept.into());
                    let specialist =
                        if dept == "surgery" { SPECIALISTS[rng.gen_range(0..3)] } else { "NR" };
                    attrs.insert("specialist".into(), specialist.into());
                    attrs.insert("cost".into(), format!("{:.2}", rng.gen_range(20.0..2000.0)));
                    attrs.insert("staff".into(), rng.gen_range(1..6).to_string());
                    attrs.insert("queue".into(), rng.gen_range(0..40).to_string());
                    let e = EventRecord {
                        case_id: case_id.clone(),
                        activity,
                        start_ts: ts,
                        complete_ts: ts + duration,
                        attrs,
                    };
                    if !rng.gen_bool(0.1) {
                        ts += rng.gen_range(60..8 * 3600);
                    }
                    e
                })
                .collect();
            let mut graph_attrs = BTreeMap::new();
            graph_attrs.insert("age".into(), rng.gen_range(18..95).to_string());
            graph_attrs.insert("bmi".into(), format!("{:.1}", rng.gen_range(16.0..42.0)));
            graph_attrs.insert("prior_visits".into(), rng.gen_range(0..12).to_string());
            graph_attrs.insert("insurance".into(), insurance.into());
            CaseTrace { case_id, events, graph_attrs, label }
        })
        .collect();
    Ok(Dataset { schema: patients_schema(), traces, class_names, warnings: Vec::new() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_schema() -> Vec<AttributeSchema> {
        vec![AttributeSchema::key("activity"), AttributeSchema::graph("amount", Kind::Numeric)]
    }

    fn load(text: &str) -> Result<Dataset> {
        read_csv(text.as_bytes(), &tiny_schema(), "outcome")
    }

    #[test]
    fn groups_and_sorts_by_start() {
        let ds = load(
            "case_id,activity,start_ts,complete_ts,outcome,amount\n\
             c1,b,20,20,yes,5\n\
             c1,a,10,10,yes,5\n\
             c2,a,10,12,no,7\n",
        )
        .unwrap();
        assert_eq!(ds.traces.len(), 2);
        let starts: Vec<i64> = ds.traces[0].events.iter().map(|e| e.start_ts).collect();
        assert_eq!(starts, vec![10, 20]);
        assert_eq!(ds.class_names, vec!["no", "yes"]);
        assert_eq!(ds.traces[0].label, 1);
    }

    #[test]
    fn ties_keep_file_order() {
        let ds = load(
            "case_id,activity,start_ts,complete_ts,outcome,amount\n\
             c1,x,10,10,yes,5\nc1,y,10,10,yes,5\nc2,z,1,1,no,1\n",
        )
        .unwrap();
        let acts: Vec<&str> = ds.traces[0].events.iter().map(|e| e.activity.as_str()).collect();
        assert_eq!(acts, vec!["x", "y"]);
    }

    #[test]
    fn missing_activity_column() {
        let err = load("case_id,start_ts,complete_ts,outcome,amount\nc1,1,1,a,1\n").unwrap_err();
        assert!(matches!(err, Error::Schema(m) if m.contains("activity")));
    }

    #[test]
    fn missing_label_column_is_named() {
        let err = read_csv("case_id,activity,start_ts,complete_ts,amount\n".as_bytes(), &tiny_schema(), "outcome")
            .unwrap_err();
        assert!(matches!(err, Error::Schema(m) if m.contains("outcome")));
    }

    #[test]
    fn bad_timestamp_reports_line() {
        let err = load("case_id,activity,start_ts,complete_ts,outcome,amount\nc1,a,1,1,y,1\nc2,a,soon,1,n,1\n")
            .unwrap_err();
        assert!(matches!(err, Error::Row { line: 3, .. }), "{err}");
    }

    #[test]
    fn iso_timestamps() {
        assert_eq!(parse_timestamp("1970-01-01T00:01:00Z"), Some(60));
        assert_eq!(parse_timestamp("1970-01-01 00:00:05"), Some(5));
        assert_eq!(parse_timestamp("2012-01-01T00:00:00+01:00"), Some(BASE_TS - 3600));
        assert_eq!(parse_timestamp("noon"), None);
    }

    #[test]
    fn conflicting_graph_attrs_warn() {
        let ds = load("case_id,activity,start_ts,complete_ts,outcome,amount\nc1,a,1,1,y,1\nc1,b,2,2,y,9\nc2,a,1,1,n,1\n")
            .unwrap();
        assert_eq!(ds.traces[0].graph_attrs["amount"], "1");
        assert_eq!(ds.warnings.len(), 1);
    }

    #[test]
    fn schema_rules() {
        let mut s = tiny_schema();
        s.push(AttributeSchema::key("other"));
        assert!(validate_schema(&s).is_err());
        let mut s = tiny_schema();
        s.push(AttributeSchema { applies_when: None, ..AttributeSchema::specific("b", Kind::Numeric, "x", &[]) });
        assert!(validate_schema(&s).is_err());
        assert!(validate_schema(&patients_schema()).is_ok());
    }

    #[test]
    fn balanced_counts_and_determinism() {
        let ds = synth_balanced(200, 3, 7).unwrap();
        assert_eq!(ds.traces.len(), 600);
        assert_eq!(ds.class_counts(), vec![200, 200, 200]);
        assert_eq!(ds, synth_balanced(200, 3, 7).unwrap());
        assert!(!ds.has_durations());
        ds.validate().unwrap();
        for t in &ds.traces {
            assert!((4..=8).contains(&t.len()));
            let last = &t.events.last().unwrap().activity;
            assert!(last.to_lowercase().contains(&ds.class_names[t.label]));
        }
    }

    #[test]
    fn balanced_minimal() {
        let ds = synth_balanced(1, 2, 0).unwrap();
        assert_eq!(ds.traces.len(), 2);
        let finals: BTreeSet<_> = ds.traces.iter().map(|t| t.events.last().unwrap().activity.clone()).collect();
        assert_eq!(finals.len(), 2);
    }

    #[test]
    fn imbalanced_counts() {
        let ds = synth_imbalanced(428, &PATIENT_RATIOS, 1).unwrap();
        for (c, n) in ds.class_counts().into_iter().enumerate() {
            assert!((n as f64 - 428.0 * PATIENT_RATIOS[c]).abs() <= 1.0);
        }
        ds.validate().unwrap();
        assert!(ds.has_durations());
        let ds = synth_imbalanced(10, &[0.5, 0.5], 3).unwrap();
        assert_eq!(ds.class_counts(), vec![5, 5]);
    }

    #[test]
    fn imbalanced_rejects_bad_ratios() {
        assert!(synth_imbalanced(10, &[0.5, 0.4], 0).is_err());
        assert!(synth_imbalanced(10, &[1.0, 0.0], 0).is_err());
        assert!(synth_imbalanced(10, &[1.0], 0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        for ds in [synth_imbalanced(60, &PATIENT_RATIOS, 4).unwrap(), synth_balanced(5, 3, 2).unwrap()] {
            let mut buf = Vec::new();
            write_csv_to(&ds, &mut buf, "outcome").unwrap();
            let back = read_csv(buf.as_slice(), &ds.schema, "outcome").unwrap();
            assert_eq!(back, ds);
        }
    }
}
