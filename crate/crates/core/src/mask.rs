//! View identifiers and subsets of views.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::MvftError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum View {
    Temporal,
    Frequent,
    Statistic,
}

impl View {
    pub const ALL: [View; 3] = [View::Temporal, View::Frequent, View::Statistic];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Short key used in parameter names and on the command line.
    pub fn key(self) -> &'static str {
        match self {
            View::Temporal => "t",
            View::Frequent => "f",
            View::Statistic => "s",
        }
    }
}

/// A non-ordered subset of the three views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ViewMask(u8);

impl ViewMask {
    pub const ALL: ViewMask = ViewMask(0b111);

    pub fn empty() -> Self {
        ViewMask(0)
    }

    pub fn from_views(views: &[View]) -> Self {
        ViewMask(views.iter().fold(0, |acc, v| acc | 1 << v.index()))
    }

    pub fn contains(self, view: View) -> bool {
        self.0 & (1 << view.index()) != 0
    }

    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Selected views in canonical temporal, frequent, statistic order.
    pub fn views(self) -> Vec<View> {
        View::ALL.into_iter().filter(|&v| self.contains(v)).collect()
    }

    /// The seven non-empty subsets: singles, then pairs, then all three.
    pub fn non_empty_subsets() -> Vec<ViewMask> {
        let mut all: Vec<ViewMask> = (1u8..8).map(ViewMask).collect();
        all.sort_by_key(|m| (m.count(), m.views()));
        all
    }
}

impl fmt::Display for ViewMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let keys: Vec<&str> = self.views().into_iter().map(View::key).collect();
        write!(f, "{}", keys.join(","))
    }
}

impl FromStr for ViewMask {
    type Err = MvftError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut views = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let view = match part.to_ascii_lowercase().as_str() {
                "t" | "temporal" => View::Temporal,
                "f" | "frequent" | "frequency" => View::Frequent,
                "s" | "statistic" | "statistics" => View::Statistic,
                other => {
                    return Err(MvftError::Config(format!("unknown view `{other}` (use t, f, s)")))
                }
            };
            views.push(view);
        }
        let mask = ViewMask::from_views(&views);
        if mask.is_empty() {
            return Err(MvftError::Config("view subset must not be empty".into()));
        }
        Ok(mask)
    }
}

impl Serialize for ViewMask {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ViewMask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
