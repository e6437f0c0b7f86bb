use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;

const RESERVED: [&str; 4] = [PAD, UNK, CLS, SEP];

/// Lowercased whitespace words with surrounding punctuation stripped.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().filter_map(|raw| {
        let trimmed = raw.trim_matches(|c: char| !c.is_alphanumeric());
        (!trimmed.is_empty()).then(|| trimmed.to_lowercase())
    })
}

/// Special token that replaces `[CLS]` for sequences of a domain.
pub fn domain_token(domain: &str) -> String {
    format!("[{}]", domain.to_uppercase())
}

/// Word-level vocabulary with reserved and per-domain special tokens.
///
/// Ids are dense: `[PAD]`, `[UNK]`, `[CLS]`, `[SEP]` occupy 0..4, followed by
/// the domain tokens in registration order and then corpus words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "VocabRepr", try_from = "VocabRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    domains: BTreeMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    domains: Vec<String>,
    tokens: Vec<String>,
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        let mut domains: Vec<(String, u32)> = v.domains.into_iter().collect();
        domains.sort_by_key(|(_, id)| *id);
        VocabRepr {
            domains: domains.into_iter().map(|(name, _)| name).collect(),
            tokens: v.tokens,
        }
    }
}

impl TryFrom<VocabRepr> for Vocabulary {
    type Error = Error;

    fn try_from(repr: VocabRepr) -> Result<Self> {
        if repr.tokens.len() < RESERVED.len()
            || repr.tokens[..RESERVED.len()].iter().zip(RESERVED).any(|(a, b)| a != b)
        {
            return Err(Error::Data("vocabulary must start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(repr.tokens.len());
        for (id, token) in repr.tokens.iter().enumerate() {
            if index.insert(token.clone(), id as u32).is_some() {
                return Err(Error::Data(format!("token `{token}` appears twice")));
            }
        }
        let mut domains = BTreeMap::new();
        for name in repr.domains {
            let id = *index
                .get(&domain_token(&name))
                .ok_or_else(|| Error::Data(format!("missing token for domain `{name}`")))?;
            domains.insert(name, id);
        }
        Ok(Vocabulary {
            tokens: repr.tokens,
            index,
            domains,
        })
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    /// Vocabulary holding only the reserved tokens.
    pub fn new() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self {
            tokens,
            index,
            domains: BTreeMap::new(),
        }
    }

    /// Builds a vocabulary from a corpus, keeping the most frequent words so
    /// that the total size (reserved + domain tokens + words) is at most
    /// `max_size`. Frequency ties break lexicographically.
    pub fn build<'a, I, S>(texts: I, domains: &[S], max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
        S: AsRef<str>,
    {
        let mut vocab = Self::new();
        for d in domains {
            vocab.register_domain(d.as_ref())?;
        }
        if vocab.len() > max_size {
            return Err(Error::Config(format!(
                "vocabulary cap {max_size} cannot hold {} special tokens",
                vocab.len()
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for w in words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !vocab.index.contains_key(w))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (word, _) in ranked.into_iter().take(max_size - vocab.len()) {
            vocab.push(word);
        }
        Ok(vocab)
    }

    fn push(&mut self, token: String) -> u32 {
        let id = self.tokens.len() as u32;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    /// Registers a domain and its special token; idempotent.
    pub fn register_domain(&mut self, domain: &str) -> Result<u32> {
        if domain.is_empty() {
            return Err(Error::Config("domain name must be non-empty".into()));
        }
        if let Some(&id) = self.domains.get(domain) {
            return Ok(id);
        }
        let token = domain_token(domain);
        if self.index.contains_key(&token) {
            return Err(Error::Config(format!(
                "domain `{domain}` collides with existing token {token}"
            )));
        }
        let id = self.push(token);
        self.domains.insert(domain.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn domain_id(&self, domain: &str) -> Result<u32> {
        self.domains
            .get(domain)
            .copied()
            .ok_or_else(|| Error::UnknownDomain(domain.to_string()))
    }

    /// Registered domain names, sorted.
    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.domains.keys().map(String::as_str)
    }

    pub fn has_domain(&self, domain: &str) -> bool {
        self.domains.contains_key(domain)
    }

    /// Word id with `[UNK]` fallback. Special tokens are never produced from text.
    pub fn word_id(&self, word: &str) -> u32 {
        match self.index.get(word) {
            Some(&id) if id as usize >= RESERVED.len() && !self.is_domain_id(id) => id,
            _ => UNK_ID,
        }
    }

    fn is_domain_id(&self, id: u32) -> bool {
        self.domains.values().any(|&d| d == id)
    }
}

/// Token ids and attention mask for one input text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of real (unmasked) positions.
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Tokenizes `text` into exactly `max_len` positions.
///
/// Position 0 holds the domain token when `domain` is given, `[CLS]`
/// otherwise; words follow, truncated to fit, and the remainder is padded.
pub fn tokenize(
    text: &str,
    domain: Option<&str>,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<TokenSequence> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be positive".into()));
    }
    let first = match domain {
        Some(d) => vocab.domain_id(d)?,
        None => CLS_ID,
    };
    let mut ids = Vec::with_capacity(max_len);
    ids.push(first);
    ids.extend(words(text).take(max_len - 1).map(|w| vocab.word_id(&w)));
    let real = ids.len();
    ids.resize(max_len, PAD_ID);
    let mut mask = vec![0u8; max_len];
    mask[..real].fill(1);
    Ok(TokenSequence { ids, mask })
}
