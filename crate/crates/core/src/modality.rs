use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// One input channel of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "l")]
    Language,
    #[serde(rename = "a")]
    Acoustic,
    #[serde(rename = "v")]
    Visual,
}

impl Modality {
    /// Tie-break priority order: language, acoustic, visual.
    pub const PRIORITY: [Modality; 3] = [Modality::Language, Modality::Acoustic, Modality::Visual];

    /// Position in `(l, a, v)` order.
    pub fn index(self) -> usize {
        match self {
            Modality::Language => 0,
            Modality::Acoustic => 1,
            Modality::Visual => 2,
        }
    }

    pub fn from_index(i: usize) -> Modality {
        Modality::PRIORITY[i]
    }

    /// Single-letter code used in file names and tables.
    pub fn code(self) -> &'static str {
        match self {
            Modality::Language => "l",
            Modality::Acoustic => "a",
            Modality::Visual => "v",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "l" | "language" | "t" | "text" => Ok(Modality::Language),
            "a" | "acoustic" | "audio" => Ok(Modality::Acoustic),
            "v" | "visual" | "video" => Ok(Modality::Visual),
            _ => Err(Error::InvalidArgument(format!("unknown modality `{s}`"))),
        }
    }
}
