//! The three diagnostic classes and the `participant_id,label` file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Psychotic,
    Control,
    Depressed,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Psychotic, Label::Control, Label::Depressed];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Psychotic => "psychotic",
            Label::Control => "control",
            Label::Depressed => "depressed",
        }
    }

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
        write!(f, "unknown label `{}`", self.0)
    }
}

impl FromStr for Label {
    type Err = UnknownLabel;

    /// Accepts the names used across the result tables ("healthy", "depressive").
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "psychotic" | "psychosis" => Ok(Label::Psychotic),
            "control" | "healthy" => Ok(Label::Control),
            "depressed" | "depressive" | "depression" => Ok(Label::Depressed),
            _ => Err(UnknownLabel(s.to_string())),
        }
    }
}

/// Reads a `participant_id,label` CSV (with header).
pub fn read_labels(path: &Path) -> Result<BTreeMap<String, Label>> {
    let mut reader = crate::io::csv_reader(path, false)?;
    let mut out = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        if rec.len() != 2 {
            return Err(Error::Ingest {
                row,
                message: format!("expected 2 columns, found {}", rec.len()),
            });
        }
        let id = rec[0].trim().to_string();
        if id.is_empty() {
            return Err(Error::Ingest {
                row,
                message: "empty participant_id".into(),
            });
        }
        let label = rec[1].parse::<Label>().map_err(|e| Error::Ingest {
            row,
            message: e.to_string(),
        })?;
        if out.insert(id.clone(), label).is_some() {
            return Err(Error::Ingest {
                row,
                message: format!("duplicate participant `{id}`"),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_aliases() {
        assert_eq!("Healthy".parse::<Label>(), Ok(Label::Control));
        assert_eq!("depressive".parse::<Label>(), Ok(Label::Depressed));
        assert!("manic".parse::<Label>().is_err());
    }

    #[test]
    fn index_round_trip() {
        for l in Label::ALL {
            assert_eq!(Label::from_index(l.index()), Some(l));
        }
    }

    #[test]
    fn label_file_errors_carry_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.csv");
        std::fs::write(&p, "participant_id,label\np1,control\np2,manic\n").unwrap();
        match read_labels(&p) {
            Err(Error::Ingest { row, .. }) => assert_eq!(row, 3),
            other => panic!("{other:?}"),
        }
    }
}
