//! Seeded synthetic mini-app world: items, a click log and labeled
//! train/valid/test triples whose labels follow a token-overlap rule.
//!
//! Every content token belongs to one concept. A concept has an item form
//! and, with probability `alias_rate`, a distinct query form, so queries and
//! items can refer to the same thing with different tokens. A query is
//! relevant to an item iff they share at least `min_shared` concepts.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClickRecord, ItemDoc, Label, LabeledTriple};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_items: usize,
    pub n_queries: usize,
    pub n_clicks: usize,
    pub n_categories: usize,
    /// Concepts per category pool.
    pub concepts_per_category: usize,
    /// Shared-concept threshold `r` of the relevance rule.
    pub min_shared: usize,
    pub noise_rate: f64,
    /// Probability that a concept's query form differs from its item form.
    pub alias_rate: f64,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    /// Target fraction of relevant triples.
    pub positive_rate: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_items: 300,
            n_queries: 2000,
            n_clicks: 20_000,
            n_categories: 10,
            concepts_per_category: 24,
            min_shared: 2,
            noise_rate: 0.1,
            alias_rate: 0.5,
            n_train: 5000,
            n_valid: 500,
            n_test: 2000,
            positive_rate: 0.5,
            seed: 1,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_items", self.n_items),
            ("n_queries", self.n_queries),
            ("n_clicks", self.n_clicks),
            ("n_categories", self.n_categories),
            ("concepts_per_category", self.concepts_per_category),
            ("min_shared", self.min_shared),
            ("n_train", self.n_train),
            ("n_valid", self.n_valid),
            ("n_test", self.n_test),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..0.5).contains(&self.noise_rate) {
            return Err(Error::Config(format!("noise_rate {} outside [0, 0.5)", self.noise_rate)));
        }
        for (name, p) in [("alias_rate", self.alias_rate), ("positive_rate", self.positive_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        if self.concepts_per_category < ITEM_CONCEPTS {
            return Err(Error::Config(format!(
                "concepts_per_category must be at least {ITEM_CONCEPTS}"
            )));
        }
        if self.min_shared > QUERY_CONCEPTS.1 {
            return Err(Error::Config(format!(
                "min_shared {} exceeds the {} concepts a query can carry",
                self.min_shared, QUERY_CONCEPTS.1
            )));
        }
        if self.n_queries < 3 {
            return Err(Error::Config("n_queries must allow three disjoint splits".into()));
        }
        Ok(())
    }
}

const ITEM_CONCEPTS: usize = 8;
const QUERY_CONCEPTS: (usize, usize) = (2, 3);
const FILLER: usize = 16;

/// Maps surface tokens to concept ids; filler and category names map to none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub concepts: BTreeMap<String, usize>,
    pub min_shared: usize,
}

impl Lexicon {
    pub fn concepts_of(&self, text: &str) -> BTreeSet<usize> {
        text.chars()
            .filter_map(|c| self.concepts.get(c.encode_utf8(&mut [0; 4]) as &str).copied())
            .collect()
    }

    pub fn item_concepts(&self, item: &ItemDoc) -> BTreeSet<usize> {
        item.fields()
            .iter()
            .flat_map(|(_, v)| self.concepts_of(v))
            .collect()
    }

    pub fn is_relevant(&self, query: &str, item: &ItemDoc) -> bool {
        let item_concepts = self.item_concepts(item);
        self.concepts_of(query).intersection(&item_concepts).count() >= self.min_shared
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub items: Vec<ItemDoc>,
    pub clicks: Vec<ClickRecord>,
    pub train: Vec<LabeledTriple>,
    pub valid: Vec<LabeledTriple>,
    pub test: Vec<LabeledTriple>,
    pub lexicon: Lexicon,
}

struct Concept {
    item_form: char,
    query_form: char,
}

fn cjk(offset: usize) -> char {
    char::from_u32(0x4E00 + offset as u32).expect("offset inside the CJK block")
}

fn pick_chars(concepts: &[&Concept], form: impl Fn(&Concept) -> char) -> String {
    concepts.iter().map(|c| form(c)).collect()
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Distinct surface characters: concept forms, then filler, then category names.
    let n_concepts = cfg.n_categories * cfg.concepts_per_category;
    let mut next = 0usize;
    let mut fresh = || {
        next += 1;
        cjk(next - 1)
    };
    let mut pools: Vec<Vec<Concept>> = Vec::with_capacity(cfg.n_categories);
    let mut lexicon = BTreeMap::new();
    for cat in 0..cfg.n_categories {
        let mut pool = Vec::with_capacity(cfg.concepts_per_category);
        for k in 0..cfg.concepts_per_category {
            let id = cat * cfg.concepts_per_category + k;
            let item_form = fresh();
            let query_form = if rng.gen_bool(cfg.alias_rate) { fresh() } else { item_form };
            lexicon.insert(item_form.to_string(), id);
            lexicon.insert(query_form.to_string(), id);
            pool.push(Concept { item_form, query_form });
        }
        pools.push(pool);
    }
    debug_assert_eq!(lexicon.values().collect::<BTreeSet<_>>().len(), n_concepts);
    let filler: Vec<char> = (0..FILLER).map(|_| fresh()).collect();
    let category_names: Vec<String> = (0..cfg.n_categories)
        .map(|_| [fresh(), fresh()].iter().collect())
        .collect();
    let lexicon = Lexicon {
        concepts: lexicon,
        min_shared: cfg.min_shared,
    };

    // Items: eight concepts from the category pool spread over the fields.
    let mut items = Vec::with_capacity(cfg.n_items);
    let mut item_category = Vec::with_capacity(cfg.n_items);
    let mut item_concepts: Vec<Vec<usize>> = Vec::with_capacity(cfg.n_items);
    for i in 0..cfg.n_items {
        let cat = i % cfg.n_categories;
        let pool = &pools[cat];
        let mut chosen: Vec<usize> = (0..pool.len()).collect();
        chosen.shuffle(&mut rng);
        chosen.truncate(ITEM_CONCEPTS);
        let c: Vec<&Concept> = chosen.iter().map(|&k| &pool[k]).collect();
        let f = |n: usize, rng: &mut ChaCha8Rng| -> String {
            (0..n).map(|_| *filler.choose(rng).expect("filler pool")).collect()
        };
        let title = format!("{}{}", pick_chars(&c[0..2], |x| x.item_form), f(1, &mut rng));
        let keywords = [&c[1..3], &c[3..5], &c[5..7]]
            .iter()
            .map(|s| pick_chars(s, |x| x.item_form))
            .collect::<Vec<_>>()
            .join(",");
        let description = format!(
            "{}{}{}{}",
            f(2, &mut rng),
            pick_chars(&c[0..1], |x| x.item_form),
            pick_chars(&c[6..8], |x| x.item_form),
            f(2, &mut rng)
        );
        let item = ItemDoc::new(
            format!("item{i:05}"),
            [
                ("title", title),
                ("keywords", keywords),
                ("category", category_names[cat].clone()),
                ("description", description),
            ],
        )?;
        items.push(item);
        item_category.push(cat);
        item_concepts.push(chosen.iter().map(|&k| cat * cfg.concepts_per_category + k).collect());
    }

    // Queries: 2-3 concepts of an intent item, query forms, optional filler.
    let mut queries = Vec::with_capacity(cfg.n_queries);
    let mut intent = Vec::with_capacity(cfg.n_queries);
    let mut seen = HashSet::new();
    let max_attempts = cfg.n_queries * 50;
    let mut attempts = 0;
    while queries.len() < cfg.n_queries {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Config(format!(
                "cannot draw {} distinct queries from the token pools; generated {}",
                cfg.n_queries,
                queries.len()
            )));
        }
        let it = rng.gen_range(0..cfg.n_items);
        let cat = item_category[it];
        let n = rng.gen_range(QUERY_CONCEPTS.0..=QUERY_CONCEPTS.1);
        let mut ks: Vec<usize> = item_concepts[it]
            .choose_multiple(&mut rng, n)
            .map(|&id| id - cat * cfg.concepts_per_category)
            .collect();
        ks.shuffle(&mut rng);
        let mut q: String = ks.iter().map(|&k| pools[cat][k].query_form).collect();
        if rng.gen_bool(0.5) {
            q.push(*filler.choose(&mut rng).expect("filler pool"));
        }
        if seen.insert(q.clone()) {
            queries.push(q);
            intent.push(it);
        }
    }

    // Relevance sets per query.
    let concept_sets: Vec<BTreeSet<usize>> = items.iter().map(|it| lexicon.item_concepts(it)).collect();
    let relevant: Vec<Vec<usize>> = queries
        .iter()
        .map(|q| {
            let qc = lexicon.concepts_of(q);
            (0..items.len())
                .filter(|&i| qc.intersection(&concept_sets[i]).count() >= cfg.min_shared)
                .collect()
        })
        .collect();

    // Clicks: Zipf-weighted query popularity, mostly relevant items.
    let weights: Vec<f64> = (0..queries.len()).map(|r| 1.0 / (r as f64 + 1.0).powf(0.6)).collect();
    let popularity = WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?;
    let mut counts: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for _ in 0..cfg.n_clicks {
        let q = popularity.sample(&mut rng);
        let rel = &relevant[q];
        let item = if rng.gen_bool(cfg.noise_rate) && rel.len() < items.len() {
            loop {
                let cand = rng.gen_range(0..items.len());
                if rel.binary_search(&cand).is_err() {
                    break cand;
                }
            }
        } else if rng.gen_bool(0.6) {
            intent[q]
        } else {
            *rel.choose(&mut rng).expect("intent item is relevant")
        };
        *counts.entry((q, item)).or_default() += 1;
    }
    let clicks = counts
        .into_iter()
        .map(|((q, i), n)| ClickRecord {
            query: queries[q].clone(),
            item_id: items[i].item_id.clone(),
            clicks: n,
        })
        .collect();

    // Disjoint query splits sized by triple counts.
    let total = (cfg.n_train + cfg.n_valid + cfg.n_test) as f64;
    let mut order: Vec<usize> = (0..queries.len()).collect();
    order.shuffle(&mut rng);
    let n_valid_q = ((cfg.n_valid as f64 / total) * queries.len() as f64).round().max(1.0) as usize;
    let n_test_q = ((cfg.n_test as f64 / total) * queries.len() as f64).round().max(1.0) as usize;
    let (valid_q, rest) = order.split_at(n_valid_q);
    let (test_q, train_q) = rest.split_at(n_test_q);
    if train_q.is_empty() {
        return Err(Error::Config("too few queries for a training split".into()));
    }

    let by_category: HashMap<usize, Vec<usize>> =
        (0..items.len()).fold(HashMap::new(), |mut m, i| {
            m.entry(item_category[i]).or_default().push(i);
            m
        });
    let draw_split = |pool: &[usize], n: usize, rng: &mut ChaCha8Rng| -> Vec<LabeledTriple> {
        let mut used = HashSet::new();
        let mut out = Vec::with_capacity(n);
        let mut guard = 0;
        while out.len() < n && guard < n * 50 {
            guard += 1;
            let q = pool[rng.gen_range(0..pool.len())];
            let rel = &relevant[q];
            let item = if rng.gen_bool(cfg.positive_rate) {
                *rel.choose(rng).expect("intent item is relevant")
            } else if rng.gen_bool(0.5) {
                // Hard negative: same category as the intent item.
                let same = &by_category[&item_category[intent[q]]];
                *same.choose(rng).expect("category has items")
            } else {
                rng.gen_range(0..items.len())
            };
            if !used.insert((q, item)) {
                continue;
            }
            let label = Label::from_bool(rel.binary_search(&item).is_ok());
            out.push(LabeledTriple {
                query: queries[q].clone(),
                item_id: items[item].item_id.clone(),
                label,
            });
        }
        out
    };
    let train = draw_split(train_q, cfg.n_train, &mut rng);
    let valid = draw_split(valid_q, cfg.n_valid, &mut rng);
    let test = draw_split(test_q, cfg.n_test, &mut rng);

    Ok(World {
        items,
        clicks,
        train,
        valid,
        test,
        lexicon,
    })
}
