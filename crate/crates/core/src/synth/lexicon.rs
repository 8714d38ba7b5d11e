//! Directional word pairs and caption mirroring.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Unordered word pairs swapped by [`mirror_caption`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MirrorLexicon {
    pairs: Vec<(String, String)>,
    map: BTreeMap<String, String>,
}

impl Default for MirrorLexicon {
    fn default() -> Self {
        Self::new(&[
            ("left", "right"),
            ("leftward", "rightward"),
            ("clockwise", "counterclockwise"),
        ])
        .expect("built-in lexicon is valid")
    }
}

impl MirrorLexicon {
    /// Words must be lowercase ASCII letters and appear in at most one pair.
    pub fn new(pairs: &[(&str, &str)]) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut owned = Vec::with_capacity(pairs.len());
        for &(a, b) in pairs {
            for w in [a, b] {
                if w.is_empty() || !w.bytes().all(|c| c.is_ascii_lowercase()) {
                    return Err(Error::Config(format!("lexicon word {w:?} must be lowercase letters")));
                }
            }
            if a == b {
                return Err(Error::Config(format!("lexicon pair maps {a:?} to itself")));
            }
            for w in [a, b] {
                if map.contains_key(w) {
                    return Err(Error::Config(format!("lexicon word {w:?} appears twice")));
                }
            }
            map.insert(a.to_string(), b.to_string());
            map.insert(b.to_string(), a.to_string());
            owned.push((a.to_string(), b.to_string()));
        }
        Ok(Self { pairs: owned, map })
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    /// Partner of a lowercase word, if it is directional.
    pub fn partner(&self, word: &str) -> Option<&str> {
        self.map.get(word).map(String::as_str)
    }

    pub fn is_directional(&self, word: &str) -> bool {
        self.map.contains_key(word)
    }

    /// `a<TAB>b` per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) => pairs.push((a.trim().to_string(), b.trim().to_string())),
                _ => {
                    return Err(Error::Config(format!(
                        "lexicon line {}: expected two tab-separated words",
                        i + 1
                    )))
                }
            }
        }
        let refs: Vec<(&str, &str)> = pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        Self::new(&refs)
    }

    pub fn to_text(&self) -> String {
        self.pairs.iter().map(|(a, b)| format!("{a}\t{b}\n")).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Case {
    Lower,
    Upper,
    Title,
}

fn case_of(word: &str) -> Option<Case> {
    let mut chars = word.chars();
    let first = chars.next()?;
    let rest: String = chars.collect();
    if word.chars().all(|c| c.is_ascii_lowercase()) {
        Some(Case::Lower)
    } else if word.len() > 1 && word.chars().all(|c| c.is_ascii_uppercase()) {
        Some(Case::Upper)
    } else if first.is_ascii_uppercase() && rest.chars().all(|c| c.is_ascii_lowercase()) {
        Some(Case::Title)
    } else {
        None
    }
}

fn apply_case(word: &str, case: Case) -> String {
    match case {
        Case::Lower => word.to_string(),
        Case::Upper => word.to_ascii_uppercase(),
        Case::Title => {
            let mut out = word.to_string();
            out[..1].make_ascii_uppercase();
            out
        }
    }
}

/// Swaps every directional word for its partner, preserving case,
/// punctuation and whitespace.
///
/// Only all-lowercase, all-uppercase and capitalized spellings are swapped;
/// mixed-case tokens are left alone so that the map stays an involution.
pub fn mirror_caption(text: &str, lexicon: &MirrorLexicon) -> String {
    let mut out = String::with_capacity(text.len() + 8);
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String| {
        if word.is_empty() {
            return;
        }
        let swapped = case_of(word).and_then(|case| {
            lexicon
                .partner(&word.to_ascii_lowercase())
                .map(|p| apply_case(p, case))
        });
        out.push_str(swapped.as_deref().unwrap_or(word));
        word.clear();
    };
    for c in text.chars() {
        if c.is_ascii_alphabetic() {
            word.push(c);
        } else {
            flush(&mut word, &mut out);
            out.push(c);
        }
    }
    flush(&mut word, &mut out);
    out
}
