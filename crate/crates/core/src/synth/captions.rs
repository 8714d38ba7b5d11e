//! Templated caption bank and the whitespace vocabulary built over it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::latent::Direction;
use super::lexicon::{mirror_caption, MirrorLexicon};
use crate::error::{Error, Result};

/// One caption per action, written in its left-handed form where the action
/// has a chirality. Right-handed captions are obtained by mirroring.
pub const ACTIONS: [&str; 24] = [
    "a person is standing and waving the left hand",
    "a person is raising the left arm above the head",
    "a person is stepping to the left side",
    "a person is jumping in place with both feet",
    "a person is kicking forward with the left leg",
    "a person is turning the body to the left",
    "a person is bending the upper body to the left",
    "a person is clapping both hands in front of the chest",
    "a person is pointing to the left with one hand",
    "a person is rotating the left arm clockwise",
    "a person is walking leftward across the room",
    "a person is squatting down and standing up",
    "a person is lifting the left knee toward the chest",
    "a person is swinging the left arm back and forth",
    "a person is stretching the left arm to the side",
    "a person is raising both arms above the head",
    "a person is touching the left shoulder with one hand",
    "a person is punching forward with the left fist",
    "a person is leaning leftward while standing",
    "a person is bowing forward from the waist",
    "a person is drawing a circle clockwise with one hand",
    "a person is tapping the left foot on the floor",
    "a person is shaking the left hand in the air",
    "a person is waving both hands above the head",
];

pub fn num_actions() -> usize {
    ACTIONS.len()
}

/// Whether the action's caption contains a directional word.
pub fn is_directional(class_id: usize, lexicon: &MirrorLexicon) -> bool {
    ACTIONS
        .get(class_id)
        .map(|c| tokenize(c).iter().any(|w| lexicon.is_directional(w)))
        .unwrap_or(false)
}

/// Caption for an action performed in the given direction.
pub fn action_caption(class_id: usize, direction: Direction, lexicon: &MirrorLexicon) -> Result<String> {
    let base = ACTIONS
        .get(class_id)
        .ok_or_else(|| Error::Config(format!("class {class_id} outside the {}-action bank", ACTIONS.len())))?;
    let directional = is_directional(class_id, lexicon);
    match (direction, directional) {
        (Direction::None, false) => Ok(base.to_string()),
        (Direction::Left, true) => Ok(base.to_string()),
        (Direction::Right, true) => Ok(mirror_caption(base, lexicon)),
        _ => Err(Error::domain(format!(
            "class {class_id} is {} but direction is {direction:?}",
            if directional { "directional" } else { "symmetric" }
        ))),
    }
}

/// Lowercase, split on whitespace, strip surrounding punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(words: Vec<String>) -> Result<Self> {
        if words.len() < SPECIALS.len() || words[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Config("vocabulary must start with the special tokens".into()));
        }
        let mut index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Self { words, index })
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    /// Specials followed by the sorted words of `captions`.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = std::collections::BTreeSet::new();
        for c in captions {
            set.extend(tokenize(c));
        }
        let words: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(set)
            .collect();
        Self::try_from(words).expect("specials cannot collide with tokenized words")
    }

    /// Vocabulary over every action caption and its mirror.
    pub fn from_bank(lexicon: &MirrorLexicon) -> Self {
        let mirrored: Vec<String> = ACTIONS.iter().map(|c| mirror_caption(c, lexicon)).collect();
        Self::build(ACTIONS.iter().copied().chain(mirrored.iter().map(String::as_str)))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Token ids without begin/end markers.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|w| self.id(w)).collect()
    }

    /// Joins words up to the first end token, skipping other specials.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id as usize >= SPECIALS.len())
            .filter_map(|&id| self.word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
