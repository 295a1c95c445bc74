//! Caption cleaning, netspeak restoration and tokenization.
//!
//! The pipeline is `clean` → `restore` → `tokenize`. Tokenization is a
//! deterministic whitespace split with an alphabet rule rather than a
//! statistical tokenizer, so identical input yields identical tokens
//! everywhere.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Longer captions keep only their leading tokens.
pub const MAX_TOKENS: usize = 128;
pub const UNK: &str = "<unk>";

const DEFAULT_LEXICON: &str = include_str!("../data/netspeak.tsv");

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<String>,
}

impl TokenSequence {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn join(&self) -> String {
        self.tokens.join(" ")
    }
}

impl From<TokenSequence> for Vec<String> {
    fn from(seq: TokenSequence) -> Self {
        seq.tokens
    }
}

/// Single-pass token replacement table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplacementLexicon {
    entries: BTreeMap<String, String>,
}

impl Default for ReplacementLexicon {
    fn default() -> Self {
        ReplacementLexicon::parse(DEFAULT_LEXICON, "<builtin lexicon>")
            .expect("builtin lexicon is well formed")
    }
}

impl ReplacementLexicon {
    pub fn empty() -> Self {
        ReplacementLexicon {
            entries: BTreeMap::new(),
        }
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut lex = ReplacementLexicon::empty();
        for (k, v) in pairs {
            lex.insert(k, v).map_err(Error::Config)?;
        }
        Ok(lex)
    }

    fn insert(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        if key.is_empty() || key.chars().any(char::is_whitespace) {
            return Err(format!("lexicon key {key:?} must be a single token"));
        }
        if key != key.to_lowercase() {
            return Err(format!("lexicon key {key:?} is not lowercase"));
        }
        if key == value {
            return Err(format!("lexicon key {key:?} maps to itself"));
        }
        if self.entries.insert(key.to_string(), value.to_string()).is_some() {
            return Err(format!("duplicate lexicon key {key:?}"));
        }
        Ok(())
    }

    /// Parses `nonstandard<TAB>standard` lines; `#` starts a comment line.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut lex = ReplacementLexicon::empty();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: idx + 1,
                msg,
            };
            let (key, value) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected nonstandard<TAB>standard".into()))?;
            lex.insert(key.trim(), value.trim()).map_err(parse_err)?;
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ReplacementLexicon::parse(&text, &path.display().to_string())
    }

    pub fn get(&self, token: &str) -> Option<&str> {
        self.entries.get(token).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// SHA-256 over the sorted `key<TAB>value\n` listing.
    pub fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for (k, v) in &self.entries {
            hasher.update(k.as_bytes());
            hasher.update(b"\t");
            hasher.update(v.as_bytes());
            hasher.update(b"\n");
        }
        hasher.finalize().into()
    }
}

fn url_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(?:[a-z][a-z0-9+.\-]*://|www\.)\S*").unwrap())
}

fn email_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\S*@[^\s@]+\.[^\s@]+").unwrap())
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c,
            '\u{00A1}' | '\u{00A7}' | '\u{00AB}' | '\u{00B6}' | '\u{00B7}' | '\u{00BB}' | '\u{00BF}'
            | '\u{2010}'..='\u{2027}'
            | '\u{2030}'..='\u{205E}'
            | '\u{3001}'..='\u{3003}'
            | '\u{3008}'..='\u{3011}'
            | '\u{3014}'..='\u{301F}'
            | '\u{FF01}'..='\u{FF0F}'
            | '\u{FF1A}'..='\u{FF20}'
            | '\u{FF3B}'..='\u{FF40}'
            | '\u{FF5B}'..='\u{FF65}')
}

/// Removes URLs, e-mail addresses and punctuation, collapses whitespace and
/// lowercases.
///
/// An apostrophe survives only between two alphanumeric characters, so
/// contractions like `don't` stay whole while quotes are stripped.
pub fn clean(text: &str) -> String {
    let text = text.replace(['\u{2018}', '\u{2019}'], "'");
    let text = url_pattern().replace_all(&text, " ");
    let text = email_pattern().replace_all(&text, " ");
    let lowered = text.to_lowercase();

    let chars: Vec<char> = lowered.chars().collect();
    let mut kept = String::with_capacity(lowered.len());
    for (i, &c) in chars.iter().enumerate() {
        if c == '\'' {
            let prev = i.checked_sub(1).map(|j| chars[j]);
            let next = chars.get(i + 1).copied();
            if prev.is_some_and(char::is_alphanumeric) && next.is_some_and(char::is_alphanumeric) {
                kept.push(c);
            }
        } else if !is_punctuation(c) {
            kept.push(c);
        }
    }
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Replaces every whitespace-delimited token found in the lexicon.
pub fn restore(text: &str, lexicon: &ReplacementLexicon) -> String {
    text.split_whitespace()
        .map(|tok| lexicon.get(tok).unwrap_or(tok))
        .collect::<Vec<_>>()
        .join(" ")
}

fn is_token_char(c: char) -> bool {
    c.is_ascii_lowercase() || c.is_ascii_digit() || c == '\''
}

/// Splits on whitespace; tokens with any character outside `[a-z0-9']` become
/// `<unk>`. Keeps the first [`MAX_TOKENS`] tokens.
pub fn tokenize(text: &str) -> TokenSequence {
    let tokens = text
        .split_whitespace()
        .take(MAX_TOKENS)
        .map(|tok| {
            if tok.chars().all(is_token_char) {
                tok.to_string()
            } else {
                UNK.to_string()
            }
        })
        .collect();
    TokenSequence { tokens }
}

/// `tokenize(restore(clean(text)))`.
pub fn preprocess(text: &str, lexicon: &ReplacementLexicon) -> TokenSequence {
    tokenize(&restore(&clean(text), lexicon))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clean_examples() {
        assert_eq!(clean("Visit http://a.com now!!!"), "visit now");
        assert_eq!(clean(""), "");
        assert_eq!(clean("mail me@x.com today"), "mail today");
        assert_eq!(clean("see www.example.org/page?x=1, ok"), "see ok");
        assert_eq!(clean("Don't   STOP"), "don't stop");
        assert_eq!(clean("'quoted' words"), "quoted words");
        assert_eq!(clean("don’t"), "don't");
        assert_eq!(clean("@handle #tag"), "handle tag");
    }

    #[test]
    fn restore_examples() {
        let lex = ReplacementLexicon::from_pairs([("plz", "please")]).unwrap();
        assert_eq!(restore("plz reply", &lex), "please reply");
        assert_eq!(restore("no hits here", &lex), "no hits here");
        assert_eq!(restore("plz plz", &lex), "please please");
    }

    #[test]
    fn restore_is_single_pass() {
        let lex = ReplacementLexicon::from_pairs([("a", "b"), ("b", "c")]).unwrap();
        assert_eq!(restore("a b", &lex), "b c");
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("héllo 你好 world").tokens(), &[UNK, UNK, "world"]);
        assert_eq!(tokenize("good day").tokens(), &["good", "day"]);
        let long: Vec<String> = (0..200).map(|i| format!("w{i}")).collect();
        let seq = tokenize(&long.join(" "));
        assert_eq!(seq.len(), MAX_TOKENS);
        assert_eq!(seq.tokens()[127], "w127");
    }

    #[test]
    fn lexicon_validation() {
        assert!(ReplacementLexicon::from_pairs([("Plz", "please")]).is_err());
        assert!(ReplacementLexicon::from_pairs([("same", "same")]).is_err());
        let err = ReplacementLexicon::parse("# c\nok\tfine\nbroken line\n", "lex.tsv").unwrap_err();
        assert_eq!(err.to_string(), "lex.tsv:3: expected nonstandard<TAB>standard");
    }

    #[test]
    fn default_lexicon_has_fifty_entries() {
        let lex = ReplacementLexicon::default();
        assert_eq!(lex.len(), 50);
        assert_eq!(lex.get("plz"), Some("please"));
        assert_ne!(lex.digest(), ReplacementLexicon::empty().digest());
    }

    proptest! {
        #[test]
        fn clean_is_idempotent(s in "\\PC{0,80}") {
            let once = clean(&s);
            prop_assert_eq!(clean(&once), once);
        }

        #[test]
        fn clean_is_idempotent_on_web_text(
            s in "([A-Za-z]{1,6}|https?://[a-z.]{1,8}|www\\.[a-z]{1,5}\\.com|[a-z]{1,4}@[a-z]{1,4}\\.[a-z]{2}|[!?.,'’ ]{1,3}| ){0,15}"
        ) {
            let once = clean(&s);
            prop_assert_eq!(clean(&once), once);
        }

        #[test]
        fn tokens_obey_alphabet_and_bound(s in "\\PC{0,400}") {
            let seq = preprocess(&s, &ReplacementLexicon::default());
            prop_assert!(seq.len() <= MAX_TOKENS);
            for tok in seq.tokens() {
                prop_assert!(tok == UNK || (!tok.is_empty() && tok.chars().all(is_token_char)));
            }
        }

        #[test]
        fn tokenize_of_joined_tokens_is_stable(s in "\\PC{0,200}") {
            let seq = tokenize(&clean(&s));
            prop_assert_eq!(tokenize(&seq.join()), seq);
        }
    }
}
