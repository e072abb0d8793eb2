//! Attribute encoding fitted on the training split.
//!
//! A node vector is laid out as `[activity | specific | universal]`: the
//! activity block is the verb one-hot followed by the description one-hot,
//! categorical attributes are one-hot, numeric attributes are min-max scaled.
//! Inapplicable specific categoricals are filled with the `-1` sentinel and
//! masked out; inapplicable specific numerics take the training median.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eventlog::{AttributeSchema, CaseTrace, EventRecord, Kind, Level, Scope};

pub const PAD: f64 = -1.0;
pub const DURATION: &str = "duration";

/// Split an activity label into `(verb, description)`, both lowercased.
pub fn decompose_activity(label: &str) -> (String, String) {
    let trimmed = label.trim();
    match trimmed.split_once(char::is_whitespace) {
        Some((verb, rest)) => (verb.to_lowercase(), rest.trim().to_lowercase()),
        None => (trimmed.to_lowercase(), String::new()),
    }
}

pub fn duration(event: &EventRecord) -> Result<i64> {
    let d = event.complete_ts - event.start_ts;
    if d < 0 {
        return Err(Error::Data(format!(
            "event `{}` of case `{}` completes before it starts",
            event.activity, event.case_id
        )));
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    fn fit(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { min: 0.0, max: 0.0 };
        }
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Self { min, max }
    }

    /// Min-max scale clamped to `[0, 1]`; a degenerate range maps to 0.5.
    pub fn scale(&self, x: f64) -> f64 {
        if self.max <= self.min {
            0.5
        } else {
            ((x - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
        }
    }
}

/// Lower middle of the sorted values.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Verb,
    Description,
    Specific,
    Universal,
    Duration,
    Graph,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub attribute: String,
    pub role: Role,
    pub kind: Kind,
    pub offset: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderState {
    pub schema: Vec<AttributeSchema>,
    pub verb_vocab: Vec<String>,
    pub description_vocab: Vec<String>,
    /// Joint `(verb, description)` vocabulary; id 0 is reserved for unseen.
    pub activity_vocab: Vec<(String, String)>,
    pub categorical: BTreeMap<String, Vec<String>>,
    pub numeric: BTreeMap<String, Range>,
    pub medians: BTreeMap<String, f64>,
    pub duration: Option<Range>,
    pub node_layout: Vec<LayoutEntry>,
    pub graph_layout: Vec<LayoutEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedNode {
    pub vector: Vec<f64>,
    pub mask: Vec<bool>,
}

fn push_unique(vocab: &mut Vec<String>, v: &str) {
    if !vocab.iter().any(|x| x == v) {
        vocab.push(v.to_string());
    }
}

fn parse_numeric(raw: &str) -> Option<f64> {
    raw.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn layout_width(layout: &[LayoutEntry]) -> usize {
    layout.last().map_or(0, |e| e.offset + e.width)
}

impl EncoderState {
    pub fn fit(train: &[CaseTrace], schema: &[AttributeSchema]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("cannot fit encoders on an empty training set".into()));
        }
        crate::eventlog::validate_schema(schema)?;
        let mut verb_vocab = Vec::new();
        let mut description_vocab = Vec::new();
        let mut activity_vocab: Vec<(String, String)> = Vec::new();
        let mut categorical: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut numeric_values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut durations = Vec::new();

        for a in schema.iter().filter(|a| a.scope != Scope::Key) {
            if a.kind == Kind::Categorical {
                categorical.insert(a.name.clone(), Vec::new());
            } else {
                numeric_values.insert(a.name.clone(), Vec::new());
            }
        }

        for trace in train {
            for e in &trace.events {
                let (verb, desc) = decompose_activity(&e.activity);
                push_unique(&mut verb_vocab, &verb);
                push_unique(&mut description_vocab, &desc);
                if !activity_vocab.iter().any(|(v, d)| *v == verb && *d == desc) {
                    activity_vocab.push((verb, desc));
                }
                durations.push(duration(e)? as f64);
                for a in schema.iter().filter(|a| a.level == Level::Node && a.scope != Scope::Key) {
                    if let Some(p) = &a.applies_when {
                        if !p.holds(&e.attrs) {
                            continue;
                        }
                    }
                    let raw = e.attrs.get(&a.name).map(String::as_str).unwrap_or("");
                    match a.kind {
                        Kind::Categorical => push_unique(categorical.get_mut(&a.name).unwrap(), raw),
                        Kind::Numeric => {
                            let v = parse_numeric(raw).ok_or_else(|| {
                                Error::Data(format!(
                                    "numeric attribute `{}` has non-numeric value `{raw}` in case `{}`",
                                    a.name, trace.case_id
                                ))
                            })?;
                            numeric_values.get_mut(&a.name).unwrap().push(v);
                        }
                    }
                }
            }
            for a in schema.iter().filter(|a| a.level == Level::Graph) {
                let raw = trace.graph_attrs.get(&a.name).map(String::as_str).unwrap_or("");
                match a.kind {
                    Kind::Categorical => push_unique(categorical.get_mut(&a.name).unwrap(), raw),
                    Kind::Numeric => {
                        let v = parse_numeric(raw).ok_or_else(|| {
                            Error::Data(format!(
                                "numeric attribute `{}` has non-numeric value `{raw}` in case `{}`",
                                a.name, trace.case_id
                            ))
                        })?;
                        numeric_values.get_mut(&a.name).unwrap().push(v);
                    }
                }
            }
        }

        let numeric = numeric_values.iter().map(|(k, v)| (k.clone(), Range::fit(v))).collect();
        let medians = numeric_values
            .iter()
            .map(|(k, v)| (k.clone(), lower_median(v).unwrap_or(0.0)))
            .collect();
        let duration = durations.iter().any(|&d| d > 0.0).then(|| Range::fit(&durations));

        let mut state = EncoderState {
            schema: schema.to_vec(),
            verb_vocab,
            description_vocab,
            activity_vocab,
            categorical,
            numeric,
            medians,
            duration,
            node_layout: Vec::new(),
            graph_layout: Vec::new(),
        };
        state.build_layouts();
        Ok(state)
    }

    fn width_of(&self, a: &AttributeSchema) -> usize {
        match a.kind {
            Kind::Categorical => self.categorical[&a.name].len(),
            Kind::Numeric => 1,
        }
    }

    fn build_layouts(&mut self) {
        let mut node = Vec::new();
        let mut offset = 0;
        let mut push = |layout: &mut Vec<LayoutEntry>, attribute: &str, role, kind, width| {
            layout.push(LayoutEntry { attribute: attribute.to_string(), role, kind, offset, width });
            offset += width;
        };
        let key = self.schema.iter().find(|a| a.scope == Scope::Key).unwrap().name.clone();
        push(&mut node, &key, Role::Verb, Kind::Categorical, self.verb_vocab.len());
        push(&mut node, &key, Role::Description, Kind::Categorical, self.description_vocab.len());
        for a in self.schema.iter().filter(|a| a.scope == Scope::Specific) {
            push(&mut node, &a.name, Role::Specific, a.kind, self.width_of(a));
        }
        for a in self.schema.iter().filter(|a| a.level == Level::Node && a.scope == Scope::Universal) {
            push(&mut node, &a.name, Role::Universal, a.kind, self.width_of(a));
        }
        if self.duration.is_some() {
            push(&mut node, DURATION, Role::Duration, Kind::Numeric, 1);
        }
        let mut graph = Vec::new();
        let mut goff = 0;
        for a in self.schema.iter().filter(|a| a.level == Level::Graph) {
            let width = self.width_of(a);
            graph.push(LayoutEntry { attribute: a.name.clone(), role: Role::Graph, kind: a.kind, offset: goff, width });
            goff += width;
        }
        self.node_layout = node;
        self.graph_layout = graph;
    }

    /// `d_N`.
    pub fn node_width(&self) -> usize {
        layout_width(&self.node_layout)
    }

    /// `d_G`.
    pub fn graph_width(&self) -> usize {
        layout_width(&self.graph_layout)
    }

    /// Width of the leading verb + description block.
    pub fn activity_width(&self) -> usize {
        self.verb_vocab.len() + self.description_vocab.len()
    }

    /// Size of the activity embedding table (vocabulary plus the unseen slot).
    pub fn activity_vocab_size(&self) -> usize {
        self.activity_vocab.len() + 1
    }

    pub fn activity_id(&self, activity: &str) -> usize {
        let (verb, desc) = decompose_activity(activity);
        self.activity_vocab
            .iter()
            .position(|(v, d)| *v == verb && *d == desc)
            .map_or(0, |i| i + 1)
    }

    fn one_hot(vocab: &[String], value: &str, out: &mut [f64]) {
        if let Some(i) = vocab.iter().position(|v| v == value) {
            out[i] = 1.0;
        }
    }

    fn numeric_value(&self, name: &str, raw: &str) -> f64 {
        let range = self.numeric[name];
        let x = parse_numeric(raw).unwrap_or(self.medians[name]);
        range.scale(x)
    }

    pub fn encode_node(&self, event: &EventRecord) -> EncodedNode {
        let width = self.node_width();
        let mut vector = vec![0.0; width];
        let mut mask = vec![true; width];
        let (verb, desc) = decompose_activity(&event.activity);
        for entry in &self.node_layout {
            let slot = &mut vector[entry.offset..entry.offset + entry.width];
            match entry.role {
                Role::Verb => Self::one_hot(&self.verb_vocab, &verb, slot),
                Role::Description => Self::one_hot(&self.description_vocab, &desc, slot),
                Role::Duration => {
                    let d = (event.complete_ts - event.start_ts).max(0) as f64;
                    slot[0] = self.duration.expect("duration column present").scale(d);
                }
                Role::Specific | Role::Universal => {
                    let schema = self.schema.iter().find(|a| a.name == entry.attribute).expect("layout from schema");
                    let applicable = schema.applies_when.as_ref().is_none_or(|p| p.holds(&event.attrs));
                    let raw = event.attrs.get(&entry.attribute).map(String::as_str).unwrap_or("");
                    match (entry.kind, applicable) {
                        (Kind::Categorical, true) => Self::one_hot(&self.categorical[&entry.attribute], raw, slot),
                        (Kind::Categorical, false) => {
                            slot.fill(PAD);
                            mask[entry.offset..entry.offset + entry.width].fill(false);
                        }
                        (Kind::Numeric, true) => slot[0] = self.numeric_value(&entry.attribute, raw),
                        (Kind::Numeric, false) => {
                            let name = &entry.attribute;
                            slot[0] = self.numeric[name].scale(self.medians[name]);
                        }
                    }
                }
                Role::Graph => unreachable!("graph entries live in graph_layout"),
            }
        }
        EncodedNode { vector, mask }
    }

    /// `v_G` for a trace.
    pub fn encode_graph_attrs(&self, trace: &CaseTrace) -> Vec<f64> {
        let mut out = vec![0.0; self.graph_width()];
        for entry in &self.graph_layout {
            let raw = trace.graph_attrs.get(&entry.attribute).map(String::as_str).unwrap_or("");
            let slot = &mut out[entry.offset..entry.offset + entry.width];
            match entry.kind {
                Kind::Categorical => Self::one_hot(&self.categorical[&entry.attribute], raw, slot),
                Kind::Numeric => slot[0] = self.numeric_value(&entry.attribute, raw),
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
