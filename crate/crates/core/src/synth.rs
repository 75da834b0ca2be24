//! Deterministic synthetic sessions with a planted shopping intent.
//!
//! Every session draws a topic and a target product from that topic's slice of
//! a fixed catalog. Queries refine towards the target (topic anchor, then the
//! product type, then brand and color), viewed products are drawn from the
//! same topic and often share the target's type, and the session ends with the
//! purchase of the target. Session context therefore carries real signal about
//! the purchased product, its attributes and the final query.
//!
//! Randomness for session `i` comes from its own ChaCha stream, so serial and
//! parallel generation produce identical output.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use crate::session::{Action, Attribute, Edge, Product, Purchase, Query, SessionGraph};

pub const ATTR_PRODUCT_TYPE: &str = "product_type";
pub const ATTR_BRAND: &str = "brand";
pub const ATTR_COLOR: &str = "color";

/// Attribute types emitted by the generator, product sequence first.
pub const ATTRIBUTE_TYPES: [&str; 4] = [
    crate::session::PRODUCT_SEQUENCE,
    ATTR_PRODUCT_TYPE,
    ATTR_BRAND,
    ATTR_COLOR,
];

const VIEW_P: f64 = 0.7;
const ADD_TO_CART_P: f64 = 0.2;
const TARGET_ALSO_VIEWED_P: f64 = 0.3;
const SHARE_TYPE_P: f64 = 0.5;
const LAST_QUERY_BRAND_P: f64 = 0.6;
const LAST_QUERY_COLOR_P: f64 = 0.6;
const CATALOG_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub num_sessions: usize,
    /// Number of latent intents.
    pub vocab_topics: usize,
    pub tokens_per_topic: usize,
    pub types_per_topic: usize,
    pub products_per_topic: usize,
    pub brands: usize,
    pub colors: usize,
    pub filler_tokens: usize,
    pub query_len_mean: f64,
    pub title_len_mean: f64,
    pub bullet_len_mean: f64,
    /// Scales `bullet_len_mean` down to desk size.
    pub desk_factor: f64,
    pub queries_per_session_mean: f64,
    pub products_per_session_mean: f64,
    pub noise_rate: f64,
    pub seed: u64,
    /// Seed of the product catalog, shared by every session set built from it.
    pub catalog_seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_sessions: 1000,
            vocab_topics: 24,
            tokens_per_topic: 12,
            types_per_topic: 4,
            products_per_topic: 30,
            brands: 16,
            colors: 10,
            filler_tokens: 300,
            query_len_mean: 5.63,
            title_len_mean: 17.42,
            bullet_len_mean: 96.01,
            desk_factor: 0.25,
            queries_per_session_mean: 3.24,
            products_per_session_mean: 4.36,
            noise_rate: 0.1,
            seed: 0,
            catalog_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("session `{0}` was not produced by the generator")]
    NotSynthetic(String),
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        let means = [
            ("query_len_mean", self.query_len_mean),
            ("title_len_mean", self.title_len_mean),
            ("bullet_len_mean", self.bullet_len_mean),
            ("desk_factor", self.desk_factor),
            ("queries_per_session_mean", self.queries_per_session_mean),
            ("products_per_session_mean", self.products_per_session_mean),
        ];
        for (name, v) in means {
            if !(v.is_finite() && v > 0.0) {
                return bad(&format!("{name} must be > 0, got {v}"));
            }
        }
        if self.queries_per_session_mean < 1.0 || self.products_per_session_mean < 1.0 {
            return bad("sessions need at least one query and one product on average");
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return bad(&format!("noise_rate must be in [0, 1], got {}", self.noise_rate));
        }
        let counts = [
            ("vocab_topics", self.vocab_topics),
            ("types_per_topic", self.types_per_topic),
            ("brands", self.brands),
            ("colors", self.colors),
            ("filler_tokens", self.filler_tokens),
        ];
        for (name, v) in counts {
            if v == 0 {
                return bad(&format!("{name} must be >= 1"));
            }
        }
        if self.tokens_per_topic < 2 {
            return bad("tokens_per_topic must be >= 2");
        }
        if self.products_per_topic < 2 {
            return bad("products_per_topic must be >= 2");
        }
        Ok(())
    }

    /// Every content token the generator can emit, in a fixed order.
    pub fn universe(&self) -> Vec<String> {
        let mut out = Vec::new();
        for t in 0..self.vocab_topics {
            out.extend((0..self.tokens_per_topic).map(|j| topic_word(t, j)));
            out.extend((0..self.types_per_topic).map(|j| type_token(t, j)));
        }
        out.extend((0..self.brands).map(brand_token));
        out.extend((0..self.colors).map(color_token));
        out.extend((0..self.filler_tokens).map(filler_token));
        out
    }

    /// Vocabulary covering every token and attribute type the generator emits.
    pub fn vocab(&self) -> Result<crate::codec::Vocab, crate::codec::CodecError> {
        crate::codec::Vocab::new(ATTRIBUTE_TYPES.iter().map(|s| s.to_string()), self.universe())
    }

    fn bullet_mean(&self) -> f64 {
        (self.bullet_len_mean * self.desk_factor).max(1.0)
    }
}

pub fn topic_word(topic: usize, j: usize) -> String {
    format!("t{topic}w{j}")
}

/// The anchor token of a topic: present in every query of the topic's
/// sessions (absent noise) and in every title of the topic's products.
pub fn anchor_token(topic: usize) -> String {
    topic_word(topic, 0)
}

pub fn type_token(topic: usize, j: usize) -> String {
    format!("t{topic}type{j}")
}

fn brand_token(b: usize) -> String {
    format!("brand{b}")
}

fn color_token(c: usize) -> String {
    format!("color{c}")
}

fn filler_token(f: usize) -> String {
    format!("f{f}")
}

/// Draws `1 + Poisson(mean - 1)`, which has the requested mean and is >= 1.
fn count_at_least_one<R: Rng>(rng: &mut R, mean: f64) -> usize {
    let extra = mean - 1.0;
    if extra <= 0.0 {
        return 1;
    }
    let p = Poisson::new(extra).expect("positive rate");
    1 + p.sample(rng) as usize
}

#[derive(Debug, Clone)]
struct CatalogEntry {
    product_type: String,
    brand: String,
    color: String,
    product: Product,
}

struct Catalog {
    entries: Vec<CatalogEntry>,
    per_topic: usize,
}

impl Catalog {
    fn build(cfg: &GenConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.catalog_seed);
        rng.set_stream(CATALOG_STREAM);
        let mut entries = Vec::with_capacity(cfg.vocab_topics * cfg.products_per_topic);
        for topic in 0..cfg.vocab_topics {
            for m in 0..cfg.products_per_topic {
                let product_type = type_token(topic, rng.random_range(0..cfg.types_per_topic));
                let brand = brand_token(rng.random_range(0..cfg.brands));
                let color = color_token(rng.random_range(0..cfg.colors));

                let title_len = count_at_least_one(&mut rng, cfg.title_len_mean).max(4);
                let mut title = vec![brand.clone(), product_type.clone(), color.clone()];
                while title.len() + 1 < title_len {
                    title.push(content_word(&mut rng, cfg, topic, 0.5));
                }
                title.shuffle(&mut rng);
                title.insert(0, anchor_token(topic));

                let bullet_len = count_at_least_one(&mut rng, cfg.bullet_mean());
                let entries_n = rng.random_range(1..=3usize).min(bullet_len);
                let mut bullets = vec![Vec::new(); entries_n];
                for k in 0..bullet_len {
                    bullets[k % entries_n].push(content_word(&mut rng, cfg, topic, 0.4));
                }

                let product = Product::new(
                    format!("P{topic:03}-{m:03}"),
                    vec![
                        Attribute::product_sequence(title, bullets),
                        Attribute::new(ATTR_PRODUCT_TYPE, vec![product_type.clone()]),
                        Attribute::new(ATTR_BRAND, vec![brand.clone()]),
                        Attribute::new(ATTR_COLOR, vec![color.clone()]),
                    ],
                );
                entries.push(CatalogEntry {
                    product_type,
                    brand,
                    color,
                    product,
                });
            }
        }
        Self {
            entries,
            per_topic: cfg.products_per_topic,
        }
    }

    fn topic_slice(&self, topic: usize) -> std::ops::Range<usize> {
        topic * self.per_topic..(topic + 1) * self.per_topic
    }
}

/// A non-anchor topic word with probability `topical`, a filler word otherwise.
fn content_word<R: Rng>(rng: &mut R, cfg: &GenConfig, topic: usize, topical: f64) -> String {
    if rng.random_bool(topical) {
        topic_word(topic, rng.random_range(1..cfg.tokens_per_topic))
    } else {
        filler_token(rng.random_range(0..cfg.filler_tokens))
    }
}

/// Generates `cfg.num_sessions` sessions. Output is a pure function of `cfg`.
pub fn generate(cfg: &GenConfig) -> Result<Vec<SessionGraph>, SynthError> {
    cfg.validate()?;
    let catalog = Catalog::build(cfg);
    Ok((0..cfg.num_sessions)
        .into_par_iter()
        .map(|i| generate_one(cfg, &catalog, i))
        .collect())
}

fn generate_one(cfg: &GenConfig, catalog: &Catalog, index: usize) -> SessionGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);

    let topic = rng.random_range(0..cfg.vocab_topics);
    let own = catalog.topic_slice(topic);
    let target_idx = rng.random_range(own.clone());
    let target = &catalog.entries[target_idx];

    // Distractor products: mostly same topic, often same type as the target.
    let n_products = count_at_least_one(&mut rng, cfg.products_per_session_mean)
        .min(cfg.products_per_topic);
    let mut chosen = vec![target_idx];
    let mut taken: HashSet<usize> = chosen.iter().copied().collect();
    let same_type: Vec<usize> = own
        .clone()
        .filter(|&i| i != target_idx && catalog.entries[i].product_type == target.product_type)
        .collect();
    let mut attempts = 0;
    while chosen.len() < n_products && attempts < 100 {
        attempts += 1;
        let pick = if rng.random_bool(cfg.noise_rate) {
            rng.random_range(0..catalog.entries.len())
        } else if !same_type.is_empty() && rng.random_bool(SHARE_TYPE_P) {
            *same_type.choose(&mut rng).expect("non-empty")
        } else {
            rng.random_range(own.clone())
        };
        if taken.insert(pick) {
            chosen.push(pick);
        }
    }

    // Queries refine towards the target.
    let n_queries = count_at_least_one(&mut rng, cfg.queries_per_session_mean);
    let mut queries = Vec::with_capacity(n_queries);
    for qi in 0..n_queries {
        let last = qi + 1 == n_queries;
        let mut required = vec![anchor_token(topic)];
        if last || 2 * (qi + 1) > n_queries {
            required.push(target.product_type.clone());
        }
        if last {
            let brand = rng.random_bool(LAST_QUERY_BRAND_P);
            let color = rng.random_bool(LAST_QUERY_COLOR_P);
            if brand || !color {
                required.push(target.brand.clone());
            }
            if color {
                required.push(target.color.clone());
            }
        }
        let len = count_at_least_one(&mut rng, cfg.query_len_mean).max(required.len());
        let mut tokens = Vec::with_capacity(len);
        tokens.push(required[0].clone());
        for _ in required.len()..len {
            tokens.push(topic_word(topic, rng.random_range(1..cfg.tokens_per_topic)));
        }
        tokens.extend(required[1..].iter().cloned());
        for tok in tokens.iter_mut() {
            if rng.random_bool(cfg.noise_rate) {
                *tok = filler_token(rng.random_range(0..cfg.filler_tokens));
            }
        }
        queries.push(Query::new(qi, tokens));
    }

    // Interactions: each distractor hangs off a random query.
    let last_q = n_queries - 1;
    let mut events: Vec<(usize, usize, Action)> = Vec::new();
    for &p in &chosen[1..] {
        let q = rng.random_range(0..n_queries);
        let u: f64 = rng.random();
        if u < VIEW_P {
            events.push((q, p, Action::View));
        } else if u < VIEW_P + ADD_TO_CART_P {
            events.push((q, p, Action::AddToCart));
        } else {
            events.push((q, p, Action::View));
            events.push((q, p, Action::AddToCart));
        }
    }
    if rng.random_bool(TARGET_ALSO_VIEWED_P) {
        events.push((rng.random_range(0..n_queries), target_idx, Action::View));
    }
    events.sort_by_key(|&(q, _, _)| q);
    events.push((last_q, target_idx, Action::Purchase));

    let mut products: Vec<Product> = Vec::with_capacity(chosen.len());
    let mut listed = HashSet::new();
    for &(_, p, _) in &events {
        if listed.insert(p) {
            products.push(catalog.entries[p].product.clone());
        }
    }
    let edges = events
        .iter()
        .map(|&(q, p, a)| Edge::query_product(q, catalog.entries[p].product.product_id.clone(), a))
        .collect();

    SessionGraph {
        session_id: format!("syn-{}-{index:06}", cfg.seed),
        queries,
        products,
        edges,
        purchase: Some(Purchase {
            query: last_q,
            product: target.product.product_id.clone(),
        }),
        intent: Some(topic as u32),
    }
}

/// Planted intent of a generated session. Reads stored metadata; it does not
/// infer anything from the text.
pub fn intent_oracle(s: &SessionGraph) -> Result<u32, SynthError> {
    s.intent
        .ok_or_else(|| SynthError::NotSynthetic(s.session_id.clone()))
}

/// Topic of a catalog product id (`P<topic>-<index>`), if it is one.
pub fn product_topic(product_id: &str) -> Option<usize> {
    product_id.strip_prefix('P')?.split('-').next()?.parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::{validate_session, Query};

    fn small(n: usize, noise: f64, seed: u64) -> GenConfig {
        GenConfig {
            num_sessions: n,
            noise_rate: noise,
            seed,
            ..GenConfig::default()
        }
    }

    #[test]
    fn sessions_are_valid_with_one_purchase() {
        for s in generate(&small(300, 0.3, 5)).unwrap() {
            assert!(validate_session(&s).is_empty(), "{:?}", validate_session(&s));
            let purchases = s
                .query_product_edges()
                .filter(|(_, _, a)| *a == Action::Purchase)
                .count();
            assert_eq!(purchases, 1);
        }
    }

    #[test]
    fn noiseless_purchase_type_in_topic() {
        for s in generate(&small(300, 0.0, 2)).unwrap() {
            let topic = intent_oracle(&s).unwrap() as usize;
            let ty = &s.purchased_product().unwrap().attribute(ATTR_PRODUCT_TYPE).unwrap().tokens[0];
            assert!(ty.starts_with(&format!("t{topic}type")), "{ty} not in topic {topic}");
        }
    }

    #[test]
    fn noiseless_last_query_shares_anchor_with_purchase_title() {
        for s in generate(&small(300, 0.0, 3)).unwrap() {
            let anchor = anchor_token(intent_oracle(&s).unwrap() as usize);
            let last = &s.queries[s.purchase.as_ref().unwrap().query];
            assert!(last.tokens.contains(&anchor));
            assert!(s.purchased_product().unwrap().title().contains(&anchor));
        }
    }

    #[test]
    fn same_seed_same_sessions() {
        let cfg = small(50, 0.2, 11);
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        assert_ne!(generate(&cfg).unwrap(), generate(&small(50, 0.2, 12)).unwrap());
    }

    #[test]
    fn oracle_reads_metadata_even_under_full_noise() {
        for s in generate(&small(20, 1.0, 4)).unwrap() {
            let topic = intent_oracle(&s).unwrap();
            assert_eq!(product_topic(&s.purchase.as_ref().unwrap().product), Some(topic as usize));
        }
    }

    #[test]
    fn oracle_rejects_hand_built_session() {
        let mut s = SessionGraph::new("hand");
        s.queries.push(Query::new(0, vec!["x".into()]));
        assert_eq!(intent_oracle(&s), Err(SynthError::NotSynthetic("hand".into())));
    }

    #[test]
    fn refinement_overlap_grows_towards_last_query() {
        let sessions = generate(&small(2000, 0.0, 9)).unwrap();
        let overlap = |a: &Query, b: &Query| {
            let set: HashSet<_> = b.tokens.iter().collect();
            a.tokens.iter().filter(|t| set.contains(t)).count() as f64 / a.tokens.len() as f64
        };
        let (mut first, mut penultimate, mut n) = (0.0, 0.0, 0.0);
        for s in sessions.iter().filter(|s| s.queries.len() >= 3) {
            let last = s.queries.last().unwrap();
            first += overlap(&s.queries[0], last);
            penultimate += overlap(&s.queries[s.queries.len() - 2], last);
            n += 1.0;
        }
        assert!(penultimate / n > first / n);
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(generate(&GenConfig { noise_rate: 1.5, ..GenConfig::default() }).is_err());
        assert!(generate(&GenConfig { query_len_mean: 0.0, ..GenConfig::default() }).is_err());
    }
}
