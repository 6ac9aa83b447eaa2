//! Domain records and their line-delimited JSON ingestion.
//!
//! Three input families are supported: click logs (`clicks.jsonl`), item
//! catalogs (`items.jsonl`) and labeled relevance triples (`triples.jsonl`).
//! Every parser is line-oriented and never aborts on a bad line: it returns
//! the good records together with positioned errors, so that
//! `records + errors == lines` always holds.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde_json::{Map, Value};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// Strips and collapses whitespace and applies NFC. No case folding.
pub fn normalize_text(raw: &str) -> String {
    let composed: String = raw.nfc().collect();
    let mut out = String::with_capacity(composed.len());
    for word in composed.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemDoc {
    pub item_id: String,
    fields: Vec<(String, String)>,
}

impl ItemDoc {
    /// Builds an item, normalizing values. Later duplicates of a field name
    /// replace the earlier value in place.
    pub fn new<I, K, V>(item_id: impl Into<String>, fields: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: AsRef<str>,
    {
        let item_id = item_id.into();
        if item_id.trim().is_empty() {
            return Err(Error::invalid("item_id must be non-empty"));
        }
        let mut out: Vec<(String, String)> = Vec::new();
        for (name, value) in fields {
            let name = name.into();
            let value = normalize_text(value.as_ref());
            match out.iter_mut().find(|(n, _)| *n == name) {
                Some(slot) => slot.1 = value,
                None => out.push((name, value)),
            }
        }
        if out.is_empty() {
            return Err(Error::invalid(format!("item {item_id} has no fields")));
        }
        Ok(Self {
            item_id,
            fields: out,
        })
    }

    pub fn fields(&self) -> &[(String, String)] {
        &self.fields
    }

    pub fn field(&self, name: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_str())
    }

    pub fn title(&self) -> Option<&str> {
        self.field("title")
    }

    /// `title | keywords`, the short rendering used for similarity and scoring.
    pub fn short_text(&self) -> String {
        let title = self.title().unwrap_or_default();
        match self.field("keywords") {
            Some(kw) if !kw.is_empty() => format!("{title} | {kw}"),
            _ => title.to_string(),
        }
    }

    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        map.insert("item_id".into(), Value::String(self.item_id.clone()));
        for (name, value) in &self.fields {
            map.insert(name.clone(), Value::String(value.clone()));
        }
        Value::Object(map)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClickRecord {
    pub query: String,
    pub item_id: String,
    pub clicks: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Irrelevant = 0,
    Relevant = 1,
}

impl Label {
    pub fn from_bool(relevant: bool) -> Self {
        if relevant {
            Label::Relevant
        } else {
            Label::Irrelevant
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn is_relevant(self) -> bool {
        self == Label::Relevant
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledTriple {
    pub query: String,
    pub item_id: String,
    pub label: Label,
}

/// A record-level parse failure, 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Clone)]
pub struct Parsed<T> {
    pub records: Vec<T>,
    pub errors: Vec<LineError>,
    pub lines: usize,
}

impl<T> Default for Parsed<T> {
    fn default() -> Self {
        Self {
            records: Vec::new(),
            errors: Vec::new(),
            lines: 0,
        }
    }
}

fn for_each_line<R: BufRead>(
    reader: R,
    mut f: impl FnMut(usize, &str) -> std::result::Result<(), String>,
) -> Result<(usize, Vec<LineError>)> {
    let mut errors = Vec::new();
    let mut count = 0;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<stream>", e))?;
        count += 1;
        if let Err(message) = f(idx + 1, &line) {
            errors.push(LineError {
                line: idx + 1,
                message,
            });
        }
    }
    Ok((count, errors))
}

fn parse_object(line: &str) -> std::result::Result<Map<String, Value>, String> {
    if line.trim().is_empty() {
        return Err("empty line".into());
    }
    match serde_json::from_str::<Value>(line) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err("record is not a JSON object".into()),
        Err(e) => Err(format!("malformed json: {e}")),
    }
}

fn required_str<'a>(
    map: &'a Map<String, Value>,
    key: &str,
) -> std::result::Result<&'a str, String> {
    match map.get(key) {
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(format!("field `{key}` must be a string")),
        None => Err(format!("missing field `{key}`")),
    }
}

fn required_query(map: &Map<String, Value>) -> std::result::Result<String, String> {
    let query = normalize_text(required_str(map, "query")?);
    if query.is_empty() {
        return Err("query is empty after normalization".into());
    }
    Ok(query)
}

fn required_item_id(map: &Map<String, Value>) -> std::result::Result<String, String> {
    let id = required_str(map, "item_id")?;
    if id.is_empty() {
        return Err("item_id is empty".into());
    }
    Ok(id.to_string())
}

pub fn parse_click_log<R: BufRead>(reader: R) -> Result<Parsed<ClickRecord>> {
    let mut records = Vec::new();
    let (lines, errors) = for_each_line(reader, |_, line| {
        let map = parse_object(line)?;
        let query = required_query(&map)?;
        let item_id = required_item_id(&map)?;
        let clicks = match map.get("clicks") {
            Some(Value::Number(n)) => {
                if let Some(c) = n.as_u64() {
                    c
                } else if n.as_i64().is_some_and(|c| c < 0) {
                    return Err(format!("negative click count {n}"));
                } else {
                    return Err(format!("click count {n} is not an integer"));
                }
            }
            Some(_) => return Err("field `clicks` must be an integer".into()),
            None => return Err("missing field `clicks`".into()),
        };
        records.push(ClickRecord {
            query,
            item_id,
            clicks,
        });
        Ok(())
    })?;
    Ok(Parsed {
        records,
        errors,
        lines,
    })
}

/// Items keyed by id. Iteration order is by item id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Catalog {
    items: BTreeMap<String, ItemDoc>,
    pub duplicates: usize,
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts with last-wins semantics; returns true when an entry was replaced.
    pub fn insert(&mut self, item: ItemDoc) -> bool {
        let replaced = self.items.insert(item.item_id.clone(), item).is_some();
        if replaced {
            self.duplicates += 1;
        }
        replaced
    }

    pub fn get(&self, item_id: &str) -> Option<&ItemDoc> {
        self.items.get(item_id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ItemDoc> {
        self.items.values()
    }
}

impl FromIterator<ItemDoc> for Catalog {
    fn from_iter<T: IntoIterator<Item = ItemDoc>>(iter: T) -> Self {
        let mut catalog = Catalog::new();
        for item in iter {
            catalog.insert(item);
        }
        catalog
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParsedCatalog {
    pub catalog: Catalog,
    pub errors: Vec<LineError>,
    pub lines: usize,
}

pub fn parse_item_catalog<R: BufRead>(reader: R) -> Result<ParsedCatalog> {
    let mut catalog = Catalog::new();
    let (lines, errors) = for_each_line(reader, |_, line| {
        let map = parse_object(line)?;
        let item_id = required_item_id(&map)?;
        let mut fields = Vec::with_capacity(map.len());
        for (name, value) in &map {
            if name == "item_id" {
                continue;
            }
            match value {
                Value::String(s) => fields.push((name.clone(), s.clone())),
                _ => return Err(format!("field `{name}` must be a string")),
            }
        }
        let item = ItemDoc::new(item_id, fields).map_err(|e| e.to_string())?;
        catalog.insert(item);
        Ok(())
    })?;
    Ok(ParsedCatalog {
        catalog,
        errors,
        lines,
    })
}

pub fn parse_labeled_triples<R: BufRead>(reader: R) -> Result<Parsed<LabeledTriple>> {
    let mut records = Vec::new();
    let (lines, errors) = for_each_line(reader, |_, line| {
        let map = parse_object(line)?;
        let query = required_query(&map)?;
        let item_id = required_item_id(&map)?;
        let label = match map.get("label") {
            Some(Value::Number(n)) if n.as_u64() == Some(0) => Label::Irrelevant,
            Some(Value::Number(n)) if n.as_u64() == Some(1) => Label::Relevant,
            Some(Value::String(s)) if s == "0" => Label::Irrelevant,
            Some(Value::String(s)) if s == "1" => Label::Relevant,
            Some(other) => return Err(format!("label {other} outside {{0,1}}")),
            None => return Err("missing field `label`".into()),
        };
        records.push(LabeledTriple {
            query,
            item_id,
            label,
        });
        Ok(())
    })?;
    Ok(Parsed {
        records,
        errors,
        lines,
    })
}

pub fn write_clicks<W: Write>(mut out: W, records: &[ClickRecord]) -> std::io::Result<()> {
    for r in records {
        let line = serde_json::json!({"query": r.query, "item_id": r.item_id, "clicks": r.clicks});
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn write_items<'a, W: Write>(
    mut out: W,
    items: impl IntoIterator<Item = &'a ItemDoc>,
) -> std::io::Result<()> {
    for item in items {
        writeln!(out, "{}", item.to_json())?;
    }
    Ok(())
}

pub fn write_triples<W: Write>(mut out: W, records: &[LabeledTriple]) -> std::io::Result<()> {
    for r in records {
        let line = serde_json::json!({"query": r.query, "item_id": r.item_id, "label": r.label.as_u8()});
        writeln!(out, "{line}")?;
    }
    Ok(())
}
