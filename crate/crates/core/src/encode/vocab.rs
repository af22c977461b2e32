use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::EncodeError;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<bos>"];

/// Token → id map with dense ids and reserved `<pad>`, `<unk>`, `<bos>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from the pieces of `texts`. Non-reserved tokens
    /// get ids in lexicographic order, so the result does not depend on
    /// corpus order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for t in texts {
            for piece in pieces(t) {
                set.insert(piece);
            }
        }
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(set.into_iter().filter(|t| !RESERVED.contains(&t.as_str())))
            .collect();
        Self::from_tokens(tokens).expect("reserved tokens are first")
    }

    /// Restores a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, EncodeError> {
        if tokens.len() < RESERVED.len() || tokens[..3] != RESERVED {
            return Err(EncodeError::Vocabulary("reserved tokens must occupy ids 0..3".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(EncodeError::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// `{token: id}` JSON object.
    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, u32> =
            self.tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i as u32)).collect();
        serde_json::to_string_pretty(&map).expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<Self, EncodeError> {
        let map: BTreeMap<String, u32> =
            serde_json::from_str(s).map_err(|e| EncodeError::Vocabulary(e.to_string()))?;
        let mut tokens = vec![String::new(); map.len()];
        for (t, id) in map {
            let slot = tokens
                .get_mut(id as usize)
                .ok_or_else(|| EncodeError::Vocabulary(format!("id {id} is not dense")))?;
            *slot = t;
        }
        Self::from_tokens(tokens)
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        Self::from_tokens(tokens).map_err(serde::de::Error::custom)
    }
}

/// Lowercased pieces: alphabetic runs form words; every other
/// non-whitespace character (digits, `.`, `-`, punctuation) is its own piece.
pub fn pieces(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphabetic() {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// `<bos>` followed by the ids of `text`'s pieces, truncated to `max_len`.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<Vec<u32>, EncodeError> {
    if text.trim().is_empty() {
        return Err(EncodeError::EmptyText);
    }
    let mut ids = Vec::with_capacity(max_len.min(256));
    ids.push(BOS);
    for p in pieces(text) {
        if ids.len() >= max_len {
            break;
        }
        ids.push(vocab.id(&p));
    }
    ids.truncate(max_len);
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numerals_are_split_per_character() {
        assert_eq!(pieces("151.14"), ["1", "5", "1", ".", "1", "4"]);
        assert_eq!(pieces("was -3.36 degrees,"), ["was", "-", "3", ".", "3", "6", "degrees", ","]);
        assert_eq!(pieces("freezing-thawing"), ["freezing", "-", "thawing"]);
    }

    #[test]
    fn case_folding() {
        let v = Vocabulary::build(["rainfall was 0."]);
        assert_eq!(tokenize("Rainfall", &v, 16).unwrap(), tokenize("rainfall", &v, 16).unwrap());
    }

    #[test]
    fn reserved_and_unknown() {
        let v = Vocabulary::build(["alpha beta"]);
        assert_eq!(v.token(PAD), Some("<pad>"));
        assert_eq!(v.token(UNK), Some("<unk>"));
        assert_eq!(v.token(BOS), Some("<bos>"));
        let ids = tokenize("alpha gamma", &v, 16).unwrap();
        assert_eq!(ids, vec![BOS, v.id("alpha"), UNK]);
    }

    #[test]
    fn truncation_and_empty() {
        let v = Vocabulary::build(["a"]);
        let long = "a ".repeat(10_000);
        assert_eq!(tokenize(&long, &v, 256).unwrap().len(), 256);
        assert!(matches!(tokenize("  ", &v, 8), Err(EncodeError::EmptyText)));
    }

    #[test]
    fn json_round_trip_is_order_independent() {
        let a = Vocabulary::build(["b a c", "d"]);
        let b = Vocabulary::build(["d", "c a b"]);
        assert_eq!(a, b);
        assert_eq!(Vocabulary::from_json(&a.to_json()).unwrap(), a);
    }
}
