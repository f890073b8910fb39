//! Machine-readable check reports: one `{name, bound, measured, pass}` item
//! per verified inequality.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// `measured ≤ bound`.
    AtMost,
    /// `measured ≥ bound`.
    AtLeast,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckItem {
    pub name: String,
    pub bound: f64,
    pub measured: f64,
    pub relation: Relation,
    pub pass: bool,
}

impl CheckItem {
    pub fn at_most(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            bound,
            measured,
            relation: Relation::AtMost,
            pass: measured <= bound,
        }
    }

    pub fn at_least(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            bound,
            measured,
            relation: Relation::AtLeast,
            pass: measured >= bound,
        }
    }

    /// A yes/no check recorded as `measured ∈ {0, 1}` against bound 1.
    pub fn holds(name: impl Into<String>, ok: bool) -> Self {
        Self {
            name: name.into(),
            bound: 1.0,
            measured: if ok { 1.0 } else { 0.0 },
            relation: Relation::AtLeast,
            pass: ok,
        }
    }
}

impl fmt::Display for CheckItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.pass { "PASS" } else { "FAIL" };
        let op = match self.relation {
            Relation::AtMost => "<=",
            Relation::AtLeast => ">=",
        };
        write!(
            f,
            "{status} {}: {:.6e} {op} {:.6e}",
            self.name, self.measured, self.bound
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub command: String,
    pub seed: u64,
    pub items: Vec<CheckItem>,
    pub pass: bool,
}

impl Report {
    pub fn new(command: impl Into<String>, seed: u64) -> Self {
        Self {
            command: command.into(),
            seed,
            items: Vec::new(),
            pass: true,
        }
    }

    pub fn push(&mut self, item: CheckItem) {
        self.pass &= item.pass;
        self.items.push(item);
    }

    pub fn extend(&mut self, items: impl IntoIterator<Item = CheckItem>) {
        for item in items {
            self.push(item);
        }
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckItem> {
        self.items.iter().filter(|i| !i.pass)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pass_tracks_items() {
        let mut r = Report::new("x", 1);
        r.push(CheckItem::at_most("a", 1.0, 2.0));
        assert!(r.pass);
        r.push(CheckItem::at_least("b", 1.0, 2.0));
        assert!(!r.pass);
        assert_eq!(r.failures().count(), 1);
        assert_eq!(
            CheckItem::at_most("a", 1.0, 2.0).to_string(),
            "PASS a: 1.000000e0 <= 2.000000e0"
        );
    }

    #[test]
    fn json_round_trip() {
        let mut r = Report::new("verify", 7);
        r.push(CheckItem::holds("ok", true));
        let text = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<Report>(&text).unwrap(), r);
    }
}
