//! In-context pretraining instances mined from click logs.
//!
//! Construction runs in four stages:
//!
//! 1. [`build_mappings`]: query→items and item→queries candidate lists,
//!    clicks descending (coarse screening).
//! 2. [`fine_screen`]: drop candidates whose cosine similarity to the anchor
//!    is below `sigma`, cap to the `max_candidates` most similar.
//! 3. [`order_ascending`]: sort survivors by similarity, least similar first.
//! 4. [`render_icp_instance`]: substitute anchor and numbered exemplars into
//!    the direction's template.
//!
//! [`build_icp_instances`] runs the whole chain for every anchor.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Catalog, ClickRecord};
use crate::embed::{cosine_sim, TextEncoder, Vector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "Q2I")]
    Q2I,
    #[serde(rename = "I2Q")]
    I2Q,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Q2I => "Q2I",
            Direction::I2Q => "I2Q",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: String,
    pub clicks: u64,
    pub similarity: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateOrder {
    /// Clicks descending, ties by id ascending.
    ClicksDesc,
    /// Similarity ascending, ties by id ascending.
    SimilarityAsc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub anchor: String,
    pub direction: Direction,
    pub candidates: Vec<Candidate>,
    pub order: CandidateOrder,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.candidates.iter().map(|c| c.id.as_str()).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mappings {
    pub q2i: BTreeMap<String, CandidateSet>,
    pub i2q: BTreeMap<String, CandidateSet>,
}

fn sort_by_clicks(cands: &mut [Candidate]) {
    cands.sort_by(|a, b| b.clicks.cmp(&a.clicks).then_with(|| a.id.cmp(&b.id)));
}

/// Aggregates clicks per (query, item) and builds both directions.
pub fn build_mappings(clicks: &[ClickRecord]) -> Mappings {
    let mut pair_clicks: HashMap<(&str, &str), u64> = HashMap::new();
    for r in clicks {
        *pair_clicks
            .entry((r.query.as_str(), r.item_id.as_str()))
            .or_default() += r.clicks;
    }
    let mut q2i: BTreeMap<String, Vec<Candidate>> = BTreeMap::new();
    let mut i2q: BTreeMap<String, Vec<Candidate>> = BTreeMap::new();
    for ((query, item), total) in pair_clicks {
        q2i.entry(query.to_string()).or_default().push(Candidate {
            id: item.to_string(),
            clicks: total,
            similarity: None,
        });
        i2q.entry(item.to_string()).or_default().push(Candidate {
            id: query.to_string(),
            clicks: total,
            similarity: None,
        });
    }
    let finish = |direction: Direction, map: BTreeMap<String, Vec<Candidate>>| {
        map.into_iter()
            .map(|(anchor, mut candidates)| {
                sort_by_clicks(&mut candidates);
                let set = CandidateSet {
                    anchor: anchor.clone(),
                    direction,
                    candidates,
                    order: CandidateOrder::ClicksDesc,
                };
                (anchor, set)
            })
            .collect()
    };
    Mappings {
        q2i: finish(Direction::Q2I, q2i),
        i2q: finish(Direction::I2Q, i2q),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenConfig {
    pub sigma: f64,
    pub max_candidates: usize,
    pub min_candidates: usize,
}

impl Default for ScreenConfig {
    fn default() -> Self {
        Self {
            sigma: 0.35,
            max_candidates: 10,
            min_candidates: 2,
        }
    }
}

impl ScreenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return Err(Error::Config(format!("sigma {} outside (0, 1)", self.sigma)));
        }
        if self.min_candidates < 2 {
            return Err(Error::Config("min_candidates must be at least 2".into()));
        }
        if self.max_candidates < self.min_candidates {
            return Err(Error::Config(
                "max_candidates must be >= min_candidates".into(),
            ));
        }
        Ok(())
    }
}

/// Keeps candidates with `sim >= sigma`, then the `max_candidates` most
/// similar of those. Survivors keep their incoming order.
pub fn apply_threshold(cands: &CandidateSet, sims: &[f64], cfg: &ScreenConfig) -> CandidateSet {
    debug_assert_eq!(cands.len(), sims.len());
    let mut passing: Vec<(usize, f64)> = sims
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= cfg.sigma)
        .map(|(i, &s)| (i, s))
        .collect();
    if passing.len() > cfg.max_candidates {
        passing.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| cands.candidates[a.0].id.cmp(&cands.candidates[b.0].id))
        });
        passing.truncate(cfg.max_candidates);
        passing.sort_by_key(|&(i, _)| i);
    }
    CandidateSet {
        anchor: cands.anchor.clone(),
        direction: cands.direction,
        candidates: passing
            .into_iter()
            .map(|(i, s)| Candidate {
                similarity: Some(s),
                ..cands.candidates[i].clone()
            })
            .collect(),
        order: cands.order,
    }
}

/// Text a candidate is compared and rendered with: item `title | keywords`
/// for Q2I, the query string for I2Q. `None` when the item is unknown.
pub fn candidate_text(direction: Direction, id: &str, catalog: &Catalog) -> Option<String> {
    match direction {
        Direction::Q2I => catalog.get(id).map(|item| item.short_text()),
        Direction::I2Q => Some(id.to_string()),
    }
}

/// Text the anchor is embedded and rendered with.
pub fn anchor_text(direction: Direction, anchor: &str, catalog: &Catalog) -> Option<String> {
    match direction {
        Direction::Q2I => Some(anchor.to_string()),
        Direction::I2Q => catalog.get(anchor).map(|item| item.short_text()),
    }
}

/// Embeddings shared across anchors so each text is encoded once.
pub struct EmbeddingCache<'a> {
    encoder: &'a dyn TextEncoder,
    vectors: HashMap<String, Vector>,
}

impl<'a> EmbeddingCache<'a> {
    pub fn new(encoder: &'a dyn TextEncoder) -> Self {
        Self {
            encoder,
            vectors: HashMap::new(),
        }
    }

    pub fn warm<I: IntoIterator<Item = String>>(&mut self, texts: I) {
        let missing: Vec<String> = texts
            .into_iter()
            .filter(|t| !self.vectors.contains_key(t))
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let encoded: Vec<(String, Vector)> = missing
            .into_par_iter()
            .map(|t| {
                let v = self.encoder.embed(&t);
                (t, v)
            })
            .collect();
        self.vectors.extend(encoded);
    }

    pub fn get(&self, text: &str) -> Vector {
        match self.vectors.get(text) {
            Some(v) => v.clone(),
            None => self.encoder.embed(text),
        }
    }

    pub fn similarity(&self, a: &str, b: &str) -> f64 {
        let va = self.vectors.get(a).cloned().unwrap_or_else(|| self.encoder.embed(a));
        let vb = self.vectors.get(b).cloned().unwrap_or_else(|| self.encoder.embed(b));
        cosine_sim(&va, &vb).unwrap_or(0.0)
    }
}

/// Fine screening of one anchor's candidates. Candidates whose text cannot
/// be resolved against the catalog are dropped and counted.
pub fn fine_screen(
    anchor_text: &str,
    cands: &CandidateSet,
    catalog: &Catalog,
    cfg: &ScreenConfig,
    embeddings: &EmbeddingCache<'_>,
) -> (CandidateSet, usize) {
    let mut resolved = CandidateSet {
        candidates: Vec::with_capacity(cands.len()),
        ..cands.clone()
    };
    let mut sims = Vec::with_capacity(cands.len());
    let mut unresolved = 0;
    let anchor_vec = embeddings.get(anchor_text);
    for cand in &cands.candidates {
        match candidate_text(cands.direction, &cand.id, catalog) {
            Some(text) => {
                let sim = cosine_sim(&anchor_vec, &embeddings.get(&text)).unwrap_or(0.0);
                sims.push(sim);
                resolved.candidates.push(cand.clone());
            }
            None => unresolved += 1,
        }
    }
    (apply_threshold(&resolved, &sims, cfg), unresolved)
}

pub fn order_ascending(cands: &CandidateSet) -> Result<CandidateSet> {
    let mut keyed = Vec::with_capacity(cands.len());
    for c in &cands.candidates {
        let sim = c
            .similarity
            .ok_or_else(|| Error::MissingSimilarity(c.id.clone()))?;
        keyed.push((sim, c.clone()));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
    Ok(CandidateSet {
        anchor: cands.anchor.clone(),
        direction: cands.direction,
        candidates: keyed.into_iter().map(|(_, c)| c).collect(),
        order: CandidateOrder::SimilarityAsc,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IcpTemplate {
    pub q2i: String,
    pub i2q: String,
}

impl Default for IcpTemplate {
    fn default() -> Self {
        Self {
            q2i: "Query: {anchor}\nRelated services:\n{exemplars}".into(),
            i2q: "Service: {anchor}\nRelated queries:\n{exemplars}".into(),
        }
    }
}

impl IcpTemplate {
    pub fn for_direction(&self, direction: Direction) -> &str {
        match direction {
            Direction::Q2I => &self.q2i,
            Direction::I2Q => &self.i2q,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for t in [&self.q2i, &self.i2q] {
            if t.matches("{anchor}").count() != 1 || t.matches("{exemplars}").count() != 1 {
                return Err(Error::Config(format!(
                    "ICP template must contain {{anchor}} and {{exemplars}} exactly once: {t:?}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcpInstance {
    pub direction: Direction,
    pub anchor: String,
    pub exemplar_ids: Vec<String>,
    pub similarities: Vec<f64>,
    pub text: String,
}

/// Renders one instance, or `None` when fewer than `min_candidates`
/// survivors remain (or an exemplar cannot be resolved).
pub fn render_icp_instance(
    anchor_text: &str,
    ordered: &CandidateSet,
    catalog: &Catalog,
    template: &IcpTemplate,
    cfg: &ScreenConfig,
) -> Option<IcpInstance> {
    if ordered.len() < cfg.min_candidates {
        return None;
    }
    let mut lines = Vec::with_capacity(ordered.len());
    let mut similarities = Vec::with_capacity(ordered.len());
    for (i, cand) in ordered.candidates.iter().enumerate() {
        let text = candidate_text(ordered.direction, &cand.id, catalog)?;
        lines.push(format!("{}. {}", i + 1, text));
        similarities.push(cand.similarity?);
    }
    let text = template
        .for_direction(ordered.direction)
        .replace("{anchor}", anchor_text)
        .replace("{exemplars}", &lines.join("\n"));
    Some(IcpInstance {
        direction: ordered.direction,
        anchor: ordered.anchor.clone(),
        exemplar_ids: ordered.candidates.iter().map(|c| c.id.clone()).collect(),
        similarities,
        text,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DirectionFilter {
    #[default]
    Both,
    Q2i,
    I2q,
}

impl DirectionFilter {
    pub fn includes(self, d: Direction) -> bool {
        matches!(
            (self, d),
            (DirectionFilter::Both, _)
                | (DirectionFilter::Q2i, Direction::Q2I)
                | (DirectionFilter::I2q, Direction::I2Q)
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IcpStats {
    pub anchors: usize,
    pub emitted: usize,
    pub skipped: usize,
    pub unresolved_anchors: usize,
    pub unresolved_candidates: usize,
}

#[derive(Debug, Clone, Default)]
pub struct IcpBuild {
    pub instances: Vec<IcpInstance>,
    pub stats: IcpStats,
}

/// Runs the full four-stage construction. Output is sorted by
/// (direction, anchor).
pub fn build_icp_instances(
    clicks: &[ClickRecord],
    catalog: &Catalog,
    cfg: &ScreenConfig,
    template: &IcpTemplate,
    encoder: &dyn TextEncoder,
    directions: DirectionFilter,
) -> Result<IcpBuild> {
    cfg.validate()?;
    template.validate()?;
    let mappings = build_mappings(clicks);
    let mut cache = EmbeddingCache::new(encoder);
    cache.warm(catalog.iter().map(|item| item.short_text()));
    cache.warm(mappings.q2i.keys().cloned());

    let sets: Vec<&CandidateSet> = [Direction::Q2I, Direction::I2Q]
        .into_iter()
        .filter(|d| directions.includes(*d))
        .flat_map(|d| match d {
            Direction::Q2I => mappings.q2i.values(),
            Direction::I2Q => mappings.i2q.values(),
        })
        .collect();

    enum Outcome {
        Emitted(IcpInstance, usize),
        Skipped(usize),
        UnresolvedAnchor,
    }

    let outcomes: Vec<Outcome> = sets
        .par_iter()
        .map(|set| {
            let Some(anchor) = anchor_text(set.direction, &set.anchor, catalog) else {
                return Outcome::UnresolvedAnchor;
            };
            let (survivors, unresolved) = fine_screen(&anchor, set, catalog, cfg, &cache);
            let ordered = order_ascending(&survivors).expect("screened candidates carry similarity");
            match render_icp_instance(&anchor, &ordered, catalog, template, cfg) {
                Some(instance) => Outcome::Emitted(instance, unresolved),
                None => Outcome::Skipped(unresolved),
            }
        })
        .collect();

    let mut build = IcpBuild::default();
    build.stats.anchors = sets.len();
    for outcome in outcomes {
        match outcome {
            Outcome::Emitted(instance, unresolved) => {
                build.stats.emitted += 1;
                build.stats.unresolved_candidates += unresolved;
                build.instances.push(instance);
            }
            Outcome::Skipped(unresolved) => {
                build.stats.skipped += 1;
                build.stats.unresolved_candidates += unresolved;
            }
            Outcome::UnresolvedAnchor => build.stats.unresolved_anchors += 1,
        }
    }
    build
        .instances
        .sort_by(|a, b| (a.direction, &a.anchor).cmp(&(b.direction, &b.anchor)));
    Ok(build)
}

pub fn write_icp<W: std::io::Write>(mut out: W, instances: &[IcpInstance]) -> std::io::Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut out, inst)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ItemDoc;

    fn click(q: &str, i: &str, c: u64) -> ClickRecord {
        ClickRecord {
            query: q.into(),
            item_id: i.into(),
            clicks: c,
        }
    }

    fn set_with(ids: &[&str]) -> CandidateSet {
        CandidateSet {
            anchor: "q".into(),
            direction: Direction::Q2I,
            candidates: ids
                .iter()
                .map(|id| Candidate {
                    id: id.to_string(),
                    clicks: 1,
                    similarity: None,
                })
                .collect(),
            order: CandidateOrder::ClicksDesc,
        }
    }

    #[test]
    fn mappings_sort_by_clicks_descending() {
        let m = build_mappings(&[click("q", "a", 5), click("q", "b", 9)]);
        assert_eq!(m.q2i["q"].ids(), vec!["b", "a"]);
        assert_eq!(m.q2i["q"].candidates[0].clicks, 9);
        assert_eq!(m.i2q["a"].ids(), vec!["q"]);
    }

    #[test]
    fn mappings_aggregate_repeated_pairs() {
        let m = build_mappings(&[click("q", "a", 3), click("q", "a", 4)]);
        assert_eq!(m.q2i["q"].candidates.len(), 1);
        assert_eq!(m.q2i["q"].candidates[0].clicks, 7);
    }

    #[test]
    fn click_ties_break_by_id() {
        let m = build_mappings(&[click("q", "c", 2), click("q", "a", 2), click("q", "b", 2)]);
        assert_eq!(m.q2i["q"].ids(), vec!["a", "b", "c"]);
    }

    #[test]
    fn threshold_keeps_sims_at_or_above_sigma() {
        let out = apply_threshold(&set_with(&["x", "y", "z"]), &[0.9, 0.2, 0.5], &ScreenConfig::default());
        let sims: Vec<f64> = out.candidates.iter().map(|c| c.similarity.unwrap()).collect();
        assert_eq!(sims, vec![0.9, 0.5]);
        let exact = apply_threshold(&set_with(&["x"]), &[0.35], &ScreenConfig::default());
        assert_eq!(exact.len(), 1);
    }

    #[test]
    fn tiny_sigma_keeps_everything_up_to_cap() {
        let cfg = ScreenConfig {
            sigma: 1e-9,
            max_candidates: 3,
            min_candidates: 2,
        };
        let ids = ["a", "b", "c", "d", "e"];
        let sims = [0.1, 0.5, 0.3, 0.05, 0.4];
        let out = apply_threshold(&set_with(&ids), &sims, &cfg);
        assert_eq!(out.ids(), vec!["b", "c", "e"]);
        let uncapped = apply_threshold(&set_with(&ids[..3]), &sims[..3], &cfg);
        assert_eq!(uncapped.len(), 3);
    }

    #[test]
    fn ascending_order_and_ties() {
        let mut set = set_with(&["A", "B", "C"]);
        for (c, s) in set.candidates.iter_mut().zip([0.9, 0.4, 0.7]) {
            c.similarity = Some(s);
        }
        assert_eq!(order_ascending(&set).unwrap().ids(), vec!["B", "C", "A"]);

        let mut tied = set_with(&["z", "y"]);
        for c in &mut tied.candidates {
            c.similarity = Some(0.5);
        }
        assert_eq!(order_ascending(&tied).unwrap().ids(), vec!["y", "z"]);

        let mut single = set_with(&["only"]);
        single.candidates[0].similarity = Some(0.1);
        assert_eq!(order_ascending(&single).unwrap().ids(), vec!["only"]);
    }

    #[test]
    fn ordering_requires_similarity() {
        assert!(matches!(
            order_ascending(&set_with(&["a"])),
            Err(Error::MissingSimilarity(_))
        ));
    }

    #[test]
    fn q2i_rendering_layout() {
        let catalog: Catalog = [
            ItemDoc::new("A", [("title", "Alpha Clinic"), ("keywords", "clinic")]).unwrap(),
            ItemDoc::new("B", [("title", "Beta Pharmacy"), ("keywords", "vaccine,flu")]).unwrap(),
        ]
        .into_iter()
        .collect();
        let mut set = set_with(&["B", "A"]);
        set.anchor = "flu shot".into();
        set.candidates[0].similarity = Some(0.4);
        set.candidates[1].similarity = Some(0.6);
        let inst = render_icp_instance("flu shot", &set, &catalog, &IcpTemplate::default(), &ScreenConfig::default())
            .unwrap();
        assert_eq!(
            inst.text,
            "Query: flu shot\nRelated services:\n1. Beta Pharmacy | vaccine,flu\n2. Alpha Clinic | clinic"
        );
        assert_eq!(inst.exemplar_ids, vec!["B", "A"]);
    }

    #[test]
    fn too_few_survivors_are_skipped() {
        let mut set = set_with(&["A"]);
        set.candidates[0].similarity = Some(0.9);
        let catalog: Catalog = [ItemDoc::new("A", [("title", "x")]).unwrap()].into_iter().collect();
        assert!(render_icp_instance("q", &set, &catalog, &IcpTemplate::default(), &ScreenConfig::default()).is_none());
    }

    #[test]
    fn template_validation() {
        assert!(IcpTemplate::default().validate().is_ok());
        let bad = IcpTemplate {
            q2i: "{anchor}".into(),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
