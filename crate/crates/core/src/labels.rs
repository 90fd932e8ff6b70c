//! Evidence levels and the five-slot label vector shared by every stage.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of evidence levels (label dimension).
pub const NUM_LEVELS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    A,
    B,
    C,
    D,
    E,
}

impl Level {
    pub const ALL: [Level; NUM_LEVELS] = [Level::A, Level::B, Level::C, Level::D, Level::E];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Level> {
        Self::ALL.get(i).copied()
    }

    pub fn letter(self) -> char {
        (b'A' + self as u8) as char
    }

    pub fn from_letter(c: char) -> Option<Level> {
        match c.to_ascii_uppercase() {
            'A' => Some(Level::A),
            'B' => Some(Level::B),
            'C' => Some(Level::C),
            'D' => Some(Level::D),
            'E' => Some(Level::E),
            _ => None,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut chars = s.trim().chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => {
                Level::from_letter(c).ok_or_else(|| Error::invalid(format!("unknown level `{s}`")))
            }
            _ => Err(Error::invalid(format!("unknown level `{s}`"))),
        }
    }
}

/// Multi-label target: slot `i` is set iff the abstract carries level `i`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct LabelVector(pub [bool; NUM_LEVELS]);

impl LabelVector {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_levels<I: IntoIterator<Item = Level>>(levels: I) -> Self {
        let mut v = Self::default();
        for l in levels {
            v.set(l, true);
        }
        v
    }

    pub fn get(&self, level: Level) -> bool {
        self.0[level.index()]
    }

    pub fn set(&mut self, level: Level, value: bool) {
        self.0[level.index()] = value;
    }

    pub fn levels(&self) -> impl Iterator<Item = Level> + '_ {
        Level::ALL.into_iter().filter(|l| self.get(*l))
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn union(&self, other: &LabelVector) -> LabelVector {
        let mut out = *self;
        for i in 0..NUM_LEVELS {
            out.0[i] |= other.0[i];
        }
        out
    }

    pub fn as_f64(&self) -> [f64; NUM_LEVELS] {
        self.0.map(|b| if b { 1.0 } else { 0.0 })
    }
}

impl fmt::Display for LabelVector {
    /// Comma-separated letters, e.g. `C,D`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let letters: Vec<String> = self.levels().map(|l| l.to_string()).collect();
        write!(f, "{}", letters.join(","))
    }
}

// Serialized as {"A": bool, ..., "E": bool}.
impl Serialize for LabelVector {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = serializer.serialize_map(Some(NUM_LEVELS))?;
        for l in Level::ALL {
            map.serialize_entry(&l.letter().to_string(), &self.get(l))?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for LabelVector {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let map = std::collections::BTreeMap::<String, bool>::deserialize(deserializer)?;
        let mut v = LabelVector::default();
        for (k, val) in map {
            let level: Level = k.parse().map_err(serde::de::Error::custom)?;
            v.set(level, val);
        }
        Ok(v)
    }
}
