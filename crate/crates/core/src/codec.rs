//! Vocabulary, item serialization and the two masking strategies.
//!
//! Id layout: `[PAD] [MASK] [SEARCH] [TITLE] [BULLET]`, then one `[ATTR:<type>]`
//! token per registered attribute type, then content tokens. Reserved ids are
//! therefore always smaller than content ids.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io;
use std::ops::Range;
use std::path::Path;

use rand::Rng;

use crate::session::{Attribute, Query, SessionGraph};

pub type TokenId = u32;

pub const PAD: &str = "[PAD]";
pub const MASK: &str = "[MASK]";
pub const SEARCH: &str = "[SEARCH]";
pub const TITLE: &str = "[TITLE]";
pub const BULLET: &str = "[BULLET]";
const FIXED_SPECIALS: [&str; 5] = [PAD, MASK, SEARCH, TITLE, BULLET];

pub const VOCAB_HEADER: &str = "#ceres-vocab v1";

/// Fraction of long-field tokens selected for prediction.
pub const LONG_SELECT_P: f64 = 0.15;
/// Probability that a short field is chosen for masking at all.
pub const SHORT_SEQUENCE_P: f64 = 0.5;
/// Per-token selection rate inside a chosen short field.
pub const SHORT_TOKEN_P: f64 = 0.5;
/// Corruption of a selected token: `[MASK]`, random token, or left unchanged.
pub const REPLACE_MASK_P: f64 = 0.8;
pub const REPLACE_RANDOM_P: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("token `{0}` is not in the vocabulary")]
    UnknownToken(String),
    #[error("attribute type `{found}` is not registered (registered: {registered})")]
    UnknownAttrType { found: String, registered: String },
    #[error("cannot encode an empty sequence")]
    EmptySequence,
    #[error("duplicate token `{0}` in vocabulary")]
    Duplicate(String),
    #[error("vocab line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

pub fn attr_token(attr_type: &str) -> String {
    format!("[ATTR:{attr_type}]")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    attr_types: Vec<String>,
}

impl Vocab {
    /// Builds a vocabulary from attribute types and content tokens. Content
    /// tokens keep their first-seen order; repeats are ignored.
    pub fn new<A, C>(attr_types: A, content: C) -> Result<Self, CodecError>
    where
        A: IntoIterator,
        A::Item: AsRef<str>,
        C: IntoIterator,
        C::Item: Into<String>,
    {
        let mut tokens: Vec<String> = FIXED_SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut attrs = Vec::new();
        for a in attr_types {
            let a = a.as_ref().to_string();
            if attrs.contains(&a) {
                return Err(CodecError::Duplicate(attr_token(&a)));
            }
            tokens.push(attr_token(&a));
            attrs.push(a);
        }
        let mut index: HashMap<String, TokenId> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        for tok in content {
            let tok = tok.into();
            if tok.starts_with('[') && tok.ends_with(']') {
                return Err(CodecError::Duplicate(tok));
            }
            if !index.contains_key(&tok) {
                index.insert(tok.clone(), tokens.len() as TokenId);
                tokens.push(tok);
            }
        }
        Ok(Self {
            tokens,
            index,
            attr_types: attrs,
        })
    }

    /// Vocabulary covering every token and attribute type in `sessions`, both
    /// sorted for stability.
    pub fn from_sessions<'a>(
        sessions: impl IntoIterator<Item = &'a SessionGraph>,
    ) -> Result<Self, CodecError> {
        let mut attrs = BTreeSet::new();
        let mut content = BTreeSet::new();
        for s in sessions {
            for q in &s.queries {
                content.extend(q.tokens.iter().cloned());
            }
            for p in &s.products {
                for a in &p.attributes {
                    attrs.insert(a.attr_type.clone());
                    content.extend(a.tokens.iter().cloned());
                }
            }
        }
        Self::new(attrs, content)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_reserved(&self) -> usize {
        FIXED_SPECIALS.len() + self.attr_types.len()
    }

    pub fn content_range(&self) -> Range<TokenId> {
        self.num_reserved() as TokenId..self.tokens.len() as TokenId
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < self.num_reserved()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn attr_types(&self) -> &[String] {
        &self.attr_types
    }

    pub fn attr_id(&self, attr_type: &str) -> Option<TokenId> {
        self.attr_types
            .iter()
            .position(|a| a == attr_type)
            .map(|i| (FIXED_SPECIALS.len() + i) as TokenId)
    }

    pub fn pad_id(&self) -> TokenId {
        0
    }

    pub fn mask_id(&self) -> TokenId {
        1
    }

    pub fn search_id(&self) -> TokenId {
        2
    }

    pub fn title_id(&self) -> TokenId {
        3
    }

    pub fn bullet_id(&self) -> TokenId {
        4
    }

    fn content_id(&self, token: &str) -> Result<TokenId, CodecError> {
        match self.id(token) {
            Some(id) if !self.is_special(id) => Ok(id),
            _ => Err(CodecError::UnknownToken(token.to_string())),
        }
    }

    fn content_ids(&self, tokens: &[String]) -> Result<Vec<TokenId>, CodecError> {
        tokens.iter().map(|t| self.content_id(t)).collect()
    }

    /// `[SEARCH]` followed by the query tokens.
    pub fn encode_query(&self, q: &Query) -> Result<TokenSeq, CodecError> {
        if q.tokens.is_empty() {
            return Err(CodecError::EmptySequence);
        }
        let mut ids = Vec::with_capacity(q.tokens.len() + 1);
        ids.push(self.search_id());
        ids.extend(self.content_ids(&q.tokens)?);
        Ok(TokenSeq { ids })
    }

    /// `[ATTR:<type>]` followed by the attribute tokens. The product sequence
    /// puts `[TITLE]` before the title and `[BULLET]` before each bullet entry.
    pub fn encode_attribute(&self, a: &Attribute) -> Result<TokenSeq, CodecError> {
        let head = self
            .attr_id(&a.attr_type)
            .ok_or_else(|| CodecError::UnknownAttrType {
                found: a.attr_type.clone(),
                registered: self.attr_types.join(", "),
            })?;
        if a.tokens.is_empty() {
            return Err(CodecError::EmptySequence);
        }
        let mut ids = vec![head];
        if a.is_product_sequence() {
            ids.push(self.title_id());
            ids.extend(self.content_ids(a.title())?);
            for bullet in a.bullets() {
                ids.push(self.bullet_id());
                ids.extend(self.content_ids(bullet)?);
            }
        } else {
            ids.extend(self.content_ids(&a.tokens)?);
        }
        Ok(TokenSeq { ids })
    }

    /// Inverse of the encoders: drops special tokens, maps ids back to text.
    pub fn decode(&self, seq: &TokenSeq) -> Vec<String> {
        seq.ids
            .iter()
            .filter(|&&id| !self.is_special(id))
            .filter_map(|&id| self.token(id).map(str::to_string))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.tokens.len() * 8);
        out.push_str(VOCAB_HEADER);
        out.push('\n');
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, CodecError> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != VOCAB_HEADER {
            return Err(CodecError::Format {
                line: 1,
                message: format!("expected header `{VOCAB_HEADER}`"),
            });
        }
        let tokens: Vec<&str> = lines.collect();
        for (i, want) in FIXED_SPECIALS.iter().enumerate() {
            if tokens.get(i) != Some(want) {
                return Err(CodecError::Format {
                    line: i + 2,
                    message: format!("expected reserved token `{want}`"),
                });
            }
        }
        let mut attrs = Vec::new();
        let mut at = FIXED_SPECIALS.len();
        while let Some(a) = tokens
            .get(at)
            .and_then(|t| t.strip_prefix("[ATTR:"))
            .and_then(|t| t.strip_suffix(']'))
        {
            attrs.push(a.to_string());
            at += 1;
        }
        let vocab = Self::new(&attrs, tokens[at..].iter().map(|t| t.to_string()))?;
        if vocab.len() != tokens.len() {
            return Err(CodecError::Format {
                line: 0,
                message: "duplicate content tokens".into(),
            });
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CodecError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CodecError> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FieldClass {
    /// Product titles and descriptions.
    Long,
    /// Queries and side attributes.
    Short,
}

impl FieldClass {
    pub fn of_attribute(a: &Attribute) -> Self {
        if a.is_product_sequence() {
            FieldClass::Long
        } else {
            FieldClass::Short
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSeq {
    /// Ids after corruption.
    pub input_ids: Vec<TokenId>,
    /// Original ids.
    pub target_ids: Vec<TokenId>,
    /// Selected positions, ascending. Includes positions that were replaced by
    /// a random token or left unchanged.
    pub mask_positions: Vec<usize>,
    pub field_class: FieldClass,
}

/// Selects tokens for prediction and corrupts them.
///
/// Long fields select each maskable token with probability 0.15. A short
/// field is chosen with probability 0.5; inside a chosen field each token is
/// selected with probability 0.5 and at least one token is always selected.
/// Selected tokens become `[MASK]` 80% of the time, a uniformly random content
/// token 10% of the time and stay unchanged otherwise. Special tokens are
/// never selected.
pub fn mask<R: Rng + ?Sized>(
    vocab: &Vocab,
    seq: &TokenSeq,
    field_class: FieldClass,
    rng: &mut R,
) -> MaskedSeq {
    let maskable: Vec<usize> = seq
        .ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| !vocab.is_special(id))
        .map(|(i, _)| i)
        .collect();
    let mut selected = Vec::new();
    match field_class {
        FieldClass::Long => {
            for &i in &maskable {
                if rng.random_bool(LONG_SELECT_P) {
                    selected.push(i);
                }
            }
        }
        FieldClass::Short => {
            if !maskable.is_empty() && rng.random_bool(SHORT_SEQUENCE_P) {
                for &i in &maskable {
                    if rng.random_bool(SHORT_TOKEN_P) {
                        selected.push(i);
                    }
                }
                if selected.is_empty() {
                    selected.push(maskable[rng.random_range(0..maskable.len())]);
                }
            }
        }
    }

    let content = vocab.content_range();
    let mut input_ids = seq.ids.clone();
    for &i in &selected {
        let u: f64 = rng.random();
        if u < REPLACE_MASK_P {
            input_ids[i] = vocab.mask_id();
        } else if u < REPLACE_MASK_P + REPLACE_RANDOM_P && !content.is_empty() {
            input_ids[i] = rng.random_range(content.clone());
        }
    }
    MaskedSeq {
        input_ids,
        target_ids: seq.ids.clone(),
        mask_positions: selected,
        field_class,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn vocab() -> Vocab {
        Vocab::new(
            ["product_sequence", "color"],
            toks("a b c t1 b1 b2 red"),
        )
        .unwrap()
    }

    #[test]
    fn query_gets_search_prefix() {
        let v = vocab();
        let seq = v.encode_query(&Query::new(0, toks("a b c"))).unwrap();
        let want: Vec<_> = ["[SEARCH]", "a", "b", "c"].iter().map(|t| v.id(t).unwrap()).collect();
        assert_eq!(seq.ids, want);
        assert_eq!(v.decode(&seq), toks("a b c"));
    }

    #[test]
    fn attribute_layouts() {
        let v = vocab();
        let red = v.encode_attribute(&Attribute::new("color", toks("red"))).unwrap();
        assert_eq!(red.ids, vec![v.id("[ATTR:color]").unwrap(), v.id("red").unwrap()]);

        let seq = Attribute::product_sequence(toks("t1"), vec![toks("b1 b2")]);
        let got = v.encode_attribute(&seq).unwrap();
        let want: Vec<_> = ["[ATTR:product_sequence]", "[TITLE]", "t1", "[BULLET]", "b1", "b2"]
            .iter()
            .map(|t| v.id(t).unwrap())
            .collect();
        assert_eq!(got.ids, want);
    }

    #[test]
    fn unregistered_attribute_lists_known_types() {
        let err = vocab()
            .encode_attribute(&Attribute::new("weight", toks("a")))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("weight") && msg.contains("product_sequence, color"), "{msg}");
    }

    #[test]
    fn out_of_vocab_query_token() {
        let err = vocab().encode_query(&Query::new(0, toks("a zzz"))).unwrap_err();
        assert!(matches!(err, CodecError::UnknownToken(t) if t == "zzz"));
    }

    #[test]
    fn reserved_ids_precede_content() {
        let v = vocab();
        assert_eq!(v.num_reserved(), 7);
        assert!(v.content_range().all(|id| !v.is_special(id)));
        assert!(v.is_special(v.attr_id("color").unwrap()));
    }

    #[test]
    fn text_round_trip() {
        let v = vocab();
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocab::from_text("nope\n").is_err());
    }

    /// A fixed-sequence rng lets the short-field cases pin the coin outcomes.
    struct Scripted(Vec<u64>, usize);

    impl rand::RngCore for Scripted {
        fn next_u32(&mut self) -> u32 {
            self.next_u64() as u32
        }
        fn next_u64(&mut self) -> u64 {
            let v = self.0[self.1 % self.0.len()];
            self.1 += 1;
            v
        }
        fn fill_bytes(&mut self, dst: &mut [u8]) {
            rand::rand_core::impls::fill_bytes_via_next(self, dst)
        }
    }

    #[test]
    fn short_tails_selects_nothing() {
        let v = vocab();
        let seq = v.encode_query(&Query::new(0, toks("a b"))).unwrap();
        // u64::MAX maps to a uniform draw near 1.0: every coin comes up tails.
        let m = mask(&v, &seq, FieldClass::Short, &mut Scripted(vec![u64::MAX], 0));
        assert!(m.mask_positions.is_empty());
        assert_eq!(m.input_ids, seq.ids);
    }

    #[test]
    fn short_single_token_forced_when_chosen() {
        let v = vocab();
        let seq = v.encode_attribute(&Attribute::new("color", toks("red"))).unwrap();
        // First draw (sequence coin) heads, then tails for the token coin.
        let mut rng = Scripted(vec![0, u64::MAX, 0, 0], 0);
        let m = mask(&v, &seq, FieldClass::Short, &mut rng);
        assert_eq!(m.mask_positions, vec![1]);
    }

    #[test]
    fn specials_never_masked() {
        let v = vocab();
        let seq = v
            .encode_attribute(&Attribute::product_sequence(toks("t1 a b"), vec![toks("b1 b2 c")]))
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            for class in [FieldClass::Long, FieldClass::Short] {
                let m = mask(&v, &seq, class, &mut rng);
                assert!(m.mask_positions.iter().all(|&i| !v.is_special(seq.ids[i])));
                for i in 0..seq.len() {
                    if !m.mask_positions.contains(&i) {
                        assert_eq!(m.input_ids[i], m.target_ids[i]);
                    }
                }
            }
        }
    }
}
