//! Description templates and the closed vocabulary they draw from.

use super::{Category, Color, Relation, Role, Scenario};
use std::collections::HashMap;
use thiserror::Error;

/// Longest description any template can produce, in tokens.
pub const MAX_TOKENS: usize = 12;

pub const PAD: &str = "<pad>";

/// Number of paraphrase templates per description shape.
pub const TEMPLATE_COUNT: usize = 5;

const FILLER_WORDS: [&str; 16] = [
    "the", "find", "stop", "near", "follow", "that", "is", "left", "right", "of", "in", "front",
    "behind", "next", "to", "nearest",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VocabularyError {
    #[error("unknown word '{0}'")]
    UnknownWord(String),
    #[error("token index {index} out of range for vocabulary of {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("description has {len} tokens, more than the limit of {limit}")]
    TooLong { len: usize, limit: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Self {
        let mut unique = Vec::with_capacity(tokens.len());
        let mut index = HashMap::new();
        for t in tokens {
            if !index.contains_key(&t) {
                index.insert(t.clone(), unique.len());
                unique.push(t);
            }
        }
        Self {
            tokens: unique,
            index,
        }
    }

    /// The fixed vocabulary covering every generated description. Index 0 is padding.
    pub fn standard() -> Self {
        let mut tokens = vec![PAD.to_string()];
        tokens.extend(Color::ALL.iter().map(|c| c.name().to_string()));
        tokens.extend(Category::ALL.iter().map(|c| c.name().to_string()));
        tokens.extend(FILLER_WORDS.iter().map(|w| w.to_string()));
        Self::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn pad_index(&self) -> usize {
        self.index(PAD).unwrap_or(0)
    }
}

/// Token ids padded to a fixed length with a validity mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Lowercases, splits on whitespace and pads to `pad_to` tokens.
pub fn tokenize(text: &str, vocab: &Vocabulary, pad_to: usize) -> Result<TokenBatch, VocabularyError> {
    let mut ids = Vec::new();
    for word in text.split_whitespace() {
        let lower = word.to_lowercase();
        let id = vocab
            .index(&lower)
            .ok_or_else(|| VocabularyError::UnknownWord(lower.clone()))?;
        ids.push(id);
    }
    if ids.len() > pad_to {
        return Err(VocabularyError::TooLong {
            len: ids.len(),
            limit: pad_to,
        });
    }
    let mut mask = vec![true; ids.len()];
    mask.resize(pad_to, false);
    ids.resize(pad_to, vocab.pad_index());
    Ok(TokenBatch { ids, mask })
}

pub(crate) fn relation_phrase(r: Relation) -> &'static str {
    match r {
        Relation::LeftOf => "left of",
        Relation::RightOf => "right of",
        Relation::InFrontOf => "in front of",
        Relation::Behind => "behind",
        Relation::NextTo => "next to",
        Relation::Nearest => "nearest",
    }
}

/// Relational description, e.g. "gray car next to the yellow truck".
pub fn relational_text(
    template: usize,
    target: (Color, Category),
    relation: Relation,
    context: (Color, Category),
) -> String {
    let t = format!("{} {}", target.0.name(), target.1.name());
    let c = format!("{} {}", context.0.name(), context.1.name());
    let r = relation_phrase(relation);
    match template % TEMPLATE_COUNT {
        0 => format!("{t} {r} the {c}"),
        1 => format!("the {t} {r} the {c}"),
        2 => format!("find the {t} {r} the {c}"),
        3 => format!("stop near the {t} {r} the {c}"),
        _ => format!("follow the {t} that is {r} the {c}"),
    }
}

/// Single-object description, e.g. "gray car".
pub fn single_text(template: usize, target: (Color, Category)) -> String {
    let t = format!("{} {}", target.0.name(), target.1.name());
    match template % TEMPLATE_COUNT {
        0 => t,
        1 => format!("the {t}"),
        2 => format!("find the {t}"),
        3 => format!("stop near the {t}"),
        _ => format!("follow the {t}"),
    }
}

/// Renders the description implied by a scenario's roles and relation.
pub fn render_description(s: &Scenario) -> String {
    let target = s.target();
    let tpair = (target.attribute, target.category);
    let context = s.objects.iter().find(|o| o.role == Role::Contextual);
    match (s.relation, context) {
        (Some(rel), Some(ctx)) => {
            relational_text(s.template, tpair, rel, (ctx.attribute, ctx.category))
        }
        _ => single_text(s.template, tpair),
    }
}
