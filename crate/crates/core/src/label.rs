use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The six lesion classes, in canonical index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    Mpox,
    Chickenpox,
    Measles,
    Cowpox,
    #[serde(rename = "HFMD")]
    Hfmd,
    Healthy,
}

pub const NUM_CLASSES: usize = 6;

impl Label {
    pub const ALL: [Label; NUM_CLASSES] = [
        Label::Mpox,
        Label::Chickenpox,
        Label::Measles,
        Label::Cowpox,
        Label::Hfmd,
        Label::Healthy,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Mpox => "Mpox",
            Label::Chickenpox => "Chickenpox",
            Label::Measles => "Measles",
            Label::Cowpox => "Cowpox",
            Label::Hfmd => "HFMD",
            Label::Healthy => "Healthy",
        }
    }

    /// Canonical class-name list, as stored in model files.
    pub fn names() -> Vec<String> {
        Self::ALL.iter().map(|l| l.as_str().to_string()).collect()
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownLabel(pub String);

impl fmt::Display for UnknownLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown label {:?}", self.0)
    }
}

impl std::error::Error for UnknownLabel {}

impl FromStr for Label {
    type Err = UnknownLabel;

    /// Case-insensitive; accepts the canonical names plus a few common aliases.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mpox" | "monkeypox" => Ok(Label::Mpox),
            "chickenpox" => Ok(Label::Chickenpox),
            "measles" => Ok(Label::Measles),
            "cowpox" => Ok(Label::Cowpox),
            "hfmd" | "hand, foot and mouth disease" | "hand_foot_mouth" => Ok(Label::Hfmd),
            "healthy" | "normal" => Ok(Label::Healthy),
            _ => Err(UnknownLabel(s.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for l in Label::ALL {
            assert_eq!(l.as_str().parse::<Label>().unwrap(), l);
            assert_eq!(Label::from_index(l.index()), Some(l));
        }
        assert_eq!("monkeypox".parse::<Label>().unwrap(), Label::Mpox);
        assert!("eczema".parse::<Label>().is_err());
        assert_eq!(Label::from_index(6), None);
    }
}
