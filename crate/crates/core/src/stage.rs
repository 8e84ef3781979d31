use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// AASM sleep stage. The discriminant is the index into 5-class score vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SleepStage {
    W,
    N1,
    N2,
    N3,
    #[serde(rename = "REM")]
    Rem,
}

impl SleepStage {
    pub const ALL: [SleepStage; 5] = [SleepStage::W, SleepStage::N1, SleepStage::N2, SleepStage::N3, SleepStage::Rem];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SleepStage::W => "W",
            SleepStage::N1 => "N1",
            SleepStage::N2 => "N2",
            SleepStage::N3 => "N3",
            SleepStage::Rem => "REM",
        }
    }

    /// One-hot score vector for label-only outputs.
    pub fn one_hot(self) -> [f64; 5] {
        let mut v = [0.0; 5];
        v[self.index()] = 1.0;
        v
    }
}

impl fmt::Display for SleepStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown sleep stage `{0}`")]
pub struct UnknownStage(pub String);

impl FromStr for SleepStage {
    type Err = UnknownStage;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "W" => Ok(SleepStage::W),
            "N1" => Ok(SleepStage::N1),
            "N2" => Ok(SleepStage::N2),
            "N3" => Ok(SleepStage::N3),
            "REM" => Ok(SleepStage::Rem),
            other => Err(UnknownStage(other.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_display_round_trip() {
        for s in SleepStage::ALL {
            assert_eq!(s.as_str().parse::<SleepStage>().unwrap(), s);
            assert_eq!(SleepStage::from_index(s.index()), Some(s));
        }
        assert!("S2".parse::<SleepStage>().is_err());
        assert_eq!(serde_json::to_string(&SleepStage::Rem).unwrap(), "\"REM\"");
    }
}
