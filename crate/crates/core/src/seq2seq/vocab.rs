//! Word-level vocabulary with one dedicated token per intent class.
//!
//! Id layout: PAD, BOS, EOS, SEP, then one token per intent, then words.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
const FIRST_INTENT: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "intent")]
pub enum TokenRole {
    Pad,
    Bos,
    Eos,
    Sep,
    Intent(usize),
    Word,
}

/// Extended transcript: `[intent token, SEP, word ids…]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub token: String,
    pub id: usize,
    pub role: TokenRole,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    entries: Vec<VocabEntry>,
    index: HashMap<String, usize>,
    num_intents: usize,
}

impl Vocabulary {
    pub fn new(num_intents: usize, words: &[String]) -> Result<Self> {
        let mut entries = vec![
            (String::from("<pad>"), TokenRole::Pad),
            ("<bos>".into(), TokenRole::Bos),
            ("<eos>".into(), TokenRole::Eos),
            ("<sep>".into(), TokenRole::Sep),
        ];
        entries.extend((0..num_intents).map(|i| (format!("<intent_{i}>"), TokenRole::Intent(i))));
        entries.extend(words.iter().map(|w| (w.clone(), TokenRole::Word)));
        let entries: Vec<VocabEntry> = entries
            .into_iter()
            .enumerate()
            .map(|(id, (token, role))| VocabEntry { token, id, role })
            .collect();
        Self::from_entries(entries)
    }

    pub fn from_entries(entries: Vec<VocabEntry>) -> Result<Self> {
        let mut index = HashMap::new();
        let mut num_intents = 0;
        for (i, e) in entries.iter().enumerate() {
            if e.id != i {
                return Err(Error::InvalidSpec(format!("vocabulary id {} at position {i}", e.id)));
            }
            let expected = match i {
                PAD => Some(TokenRole::Pad),
                BOS => Some(TokenRole::Bos),
                EOS => Some(TokenRole::Eos),
                SEP => Some(TokenRole::Sep),
                _ => None,
            };
            if let Some(r) = expected {
                if e.role != r {
                    return Err(Error::InvalidSpec(format!("token {i} must be {r:?}")));
                }
            }
            if let TokenRole::Intent(k) = e.role {
                if k != num_intents || i != FIRST_INTENT + k {
                    return Err(Error::InvalidSpec("intent tokens must be contiguous".into()));
                }
                num_intents += 1;
            }
            if index.insert(e.token.clone(), i).is_some() {
                return Err(Error::InvalidSpec(format!("duplicate token `{}`", e.token)));
            }
        }
        Ok(Self {
            entries,
            index,
            num_intents,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_intents(&self) -> usize {
        self.num_intents
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn intent_token(&self, intent: usize) -> Result<usize> {
        if intent < self.num_intents {
            Ok(FIRST_INTENT + intent)
        } else {
            Err(Error::InvalidArgument(format!(
                "intent {intent} outside 0..{}",
                self.num_intents
            )))
        }
    }

    pub fn intent_of(&self, token: usize) -> Option<usize> {
        match self.entries.get(token)?.role {
            TokenRole::Intent(k) => Some(k),
            _ => None,
        }
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.entries.get(id).map(|e| e.token.as_str())
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn word_id(&self, word: &str) -> Result<usize> {
        match self.index.get(word) {
            Some(&id) if self.entries[id].role == TokenRole::Word => Ok(id),
            _ => Err(Error::UnknownWord(word.to_string())),
        }
    }

    pub fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&id| id >= self.len()) {
            Some(&id) => Err(Error::OutOfVocab { id, vocab: self.len() }),
            None => Ok(()),
        }
    }

    pub fn tokenize<S: AsRef<str>>(&self, intent: usize, words: &[S]) -> Result<TokenSequence> {
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(self.intent_token(intent)?);
        ids.push(SEP);
        for w in words {
            ids.push(self.word_id(w.as_ref())?);
        }
        Ok(TokenSequence(ids))
    }

    /// Inverse of [`Vocabulary::tokenize`].
    pub fn detokenize(&self, seq: &TokenSequence) -> Result<(usize, Vec<String>)> {
        let ids = seq.ids();
        let intent = ids
            .first()
            .and_then(|&t| self.intent_of(t))
            .ok_or_else(|| Error::InvalidArgument("sequence does not start with an intent".into()))?;
        if ids.get(1) != Some(&SEP) {
            return Err(Error::InvalidArgument("second token must be SEP".into()));
        }
        let words = ids[2..]
            .iter()
            .map(|&id| match self.entries.get(id) {
                Some(e) if e.role == TokenRole::Word => Ok(e.token.clone()),
                _ => Err(Error::InvalidArgument(format!("token {id} is not a word"))),
            })
            .collect::<Result<_>>()?;
        Ok((intent, words))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(&self.entries)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let entries: Vec<VocabEntry> = serde_json::from_str(&fs::read_to_string(path)?)?;
        Self::from_entries(entries)
    }
}

/// Intent id read from position 0, or `None` for a malformed sequence.
pub fn extract_intent(vocab: &Vocabulary, seq: &TokenSequence) -> Option<usize> {
    seq.ids().first().and_then(|&t| vocab.intent_of(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        let words: Vec<String> = ["turn", "on", "lights", "off"].iter().map(|s| s.to_string()).collect();
        Vocabulary::new(4, &words).unwrap()
    }

    #[test]
    fn special_tokens_are_distinct() {
        let v = vocab();
        let mut ids = vec![PAD, BOS, EOS, SEP];
        ids.extend((0..4).map(|i| v.intent_token(i).unwrap()));
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), n);
    }

    #[test]
    fn empty_transcript() {
        let v = vocab();
        let s = v.tokenize::<&str>(3, &[]).unwrap();
        assert_eq!(s.ids(), &[v.intent_token(3).unwrap(), SEP]);
    }

    #[test]
    fn table_lookup() {
        let v = vocab();
        let s = v.tokenize(0, &["turn", "on", "lights"]).unwrap();
        let want = vec![
            v.intent_token(0).unwrap(),
            SEP,
            v.id("turn").unwrap(),
            v.id("on").unwrap(),
            v.id("lights").unwrap(),
        ];
        assert_eq!(s.0, want);
    }

    #[test]
    fn unknown_word_rejected() {
        assert!(matches!(vocab().tokenize(0, &["dim"]), Err(Error::UnknownWord(_))));
        // special tokens are not words
        assert!(vocab().tokenize(0, &["<sep>"]).is_err());
    }

    #[test]
    fn intent_extraction() {
        let v = vocab();
        let s = TokenSequence(vec![v.intent_token(2).unwrap(), SEP, 9]);
        assert_eq!(extract_intent(&v, &s), Some(2));
        assert_eq!(extract_intent(&v, &TokenSequence(vec![SEP, 9])), None);
        assert_eq!(extract_intent(&v, &TokenSequence(vec![])), None);
    }

    #[test]
    fn save_load() {
        let v = vocab();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.json");
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }

    proptest! {
        #[test]
        fn round_trip(intent in 0usize..4, words in prop::collection::vec(0usize..4, 0..8)) {
            let v = vocab();
            let names = ["turn", "on", "lights", "off"];
            let ws: Vec<String> = words.iter().map(|&i| names[i].to_string()).collect();
            let seq = v.tokenize(intent, &ws).unwrap();
            prop_assert_eq!(v.detokenize(&seq).unwrap(), (intent, ws));
        }
    }
}
