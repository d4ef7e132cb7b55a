use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Functional role of a single-instrument sequence within an arrangement.
///
/// The discriminant is the canonical class index used by every label
/// vector, logit vector and confusion-matrix axis (alphabetical order).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrackRole {
    Accompaniment = 0,
    Bass = 1,
    MainMelody = 2,
    Pad = 3,
    Riff = 4,
    SubMelody = 5,
}

pub const NUM_ROLES: usize = 6;

impl TrackRole {
    pub const ALL: [TrackRole; NUM_ROLES] = [
        TrackRole::Accompaniment,
        TrackRole::Bass,
        TrackRole::MainMelody,
        TrackRole::Pad,
        TrackRole::Riff,
        TrackRole::SubMelody,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(idx: usize) -> Option<TrackRole> {
        Self::ALL.get(idx).copied()
    }

    /// Metadata spelling, e.g. `main_melody`.
    pub fn as_str(self) -> &'static str {
        match self {
            TrackRole::Accompaniment => "accompaniment",
            TrackRole::Bass => "bass",
            TrackRole::MainMelody => "main_melody",
            TrackRole::Pad => "pad",
            TrackRole::Riff => "riff",
            TrackRole::SubMelody => "sub_melody",
        }
    }

    /// Axis label used on confusion plots.
    pub fn abbrev(self) -> &'static str {
        match self {
            TrackRole::Accompaniment => "Ac",
            TrackRole::Bass => "Bs",
            TrackRole::MainMelody => "MM",
            TrackRole::Pad => "Pad",
            TrackRole::Riff => "Riff",
            TrackRole::SubMelody => "SM",
        }
    }
}

impl fmt::Display for TrackRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrackRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TrackRole::ALL
            .iter()
            .copied()
            .find(|r| r.as_str() == s.trim())
            .ok_or_else(|| Error::Dataset(format!("unknown track role `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_order() {
        for (i, r) in TrackRole::ALL.iter().enumerate() {
            assert_eq!(r.index(), i);
            assert_eq!(TrackRole::from_index(i), Some(*r));
            assert_eq!(r.as_str().parse::<TrackRole>().unwrap(), *r);
        }
        assert!(TrackRole::from_index(6).is_none());
        assert!("lead".parse::<TrackRole>().is_err());
    }
}
