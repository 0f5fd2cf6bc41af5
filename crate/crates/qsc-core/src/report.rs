//! Check lines and suite reports.
//!
//! Every verification in the workspace reduces to a named scalar comparison:
//! a measured value held to an expected value within a tolerance, or to a
//! one-sided bound. Reports aggregate lines in a fixed order so that rendered
//! output is byte-stable for a fixed configuration and seed.

use serde::{Deserialize, Serialize};

/// How `measured` relates to `target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    /// `|measured - target| <= tolerance`.
    Equality,
    /// `measured <= target`.
    UpperBound,
    /// `measured >= target`.
    LowerBound,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckLine {
    pub name: String,
    pub kind: CheckKind,
    pub measured: f64,
    pub target: f64,
    /// Only meaningful for equality checks; zero otherwise.
    pub tolerance: f64,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

impl CheckLine {
    /// `|measured - expected| <= tolerance`. A non-finite measurement fails.
    pub fn eq(name: impl Into<String>, measured: f64, expected: f64, tolerance: f64) -> Self {
        let pass = measured.is_finite() && (measured - expected).abs() <= tolerance;
        CheckLine {
            name: name.into(),
            kind: CheckKind::Equality,
            measured,
            target: expected,
            tolerance,
            pass,
            note: String::new(),
        }
    }

    /// `measured <= bound`. A non-finite measurement fails (NaN compares false).
    pub fn le(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        CheckLine {
            name: name.into(),
            kind: CheckKind::UpperBound,
            measured,
            target: bound,
            tolerance: 0.0,
            pass: measured <= bound,
            note: String::new(),
        }
    }

    /// `measured >= bound`.
    pub fn ge(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        CheckLine {
            name: name.into(),
            kind: CheckKind::LowerBound,
            measured,
            target: bound,
            tolerance: 0.0,
            pass: measured >= bound,
            note: String::new(),
        }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }
}

/// Ordered collection of check lines with a pass summary.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CheckReport {
    pub lines: Vec<CheckLine>,
}

impl CheckReport {
    pub fn new() -> Self {
        CheckReport { lines: Vec::new() }
    }

    pub fn push(&mut self, line: CheckLine) {
        self.lines.push(line);
    }

    pub fn extend(&mut self, other: CheckReport) {
        self.lines.extend(other.lines);
    }

    pub fn all_pass(&self) -> bool {
        self.lines.iter().all(|l| l.pass)
    }

    pub fn failures(&self) -> usize {
        self.lines.iter().filter(|l| !l.pass).count()
    }

    /// Worst measured value among lines whose name contains `needle`.
    pub fn worst_named(&self, needle: &str) -> Option<f64> {
        self.lines
            .iter()
            .filter(|l| l.name.contains(needle))
            .map(|l| l.measured)
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }

    /// Fixed-width human table, one line per check plus a summary row.
    pub fn render_table(&self) -> String {
        let name_w = self.lines.iter().map(|l| l.name.len()).max().unwrap_or(4).max(4);
        let mut out = String::new();
        for l in &self.lines {
            let status = if l.pass { "ok  " } else { "FAIL" };
            let rel = match l.kind {
                CheckKind::Equality => " =",
                CheckKind::UpperBound => "<=",
                CheckKind::LowerBound => ">=",
            };
            out.push_str(&format!(
                "{status} {:<name_w$}  {:>19.12e} {rel} {:>19.12e}",
                l.name, l.measured, l.target
            ));
            if l.kind == CheckKind::Equality {
                out.push_str(&format!("  tol {:.3e}", l.tolerance));
            }
            if !l.note.is_empty() {
                out.push_str(&format!("  [{}]", l.note));
            }
            out.push('\n');
        }
        out.push_str(&format!("{} checks, {} failed\n", self.lines.len(), self.failures()));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comparison_rules() {
        assert!(CheckLine::eq("a", 1.0 + 1e-12, 1.0, 1e-10).pass);
        assert!(!CheckLine::eq("a", 1.1, 1.0, 1e-10).pass);
        assert!(!CheckLine::eq("a", f64::NAN, 1.0, 1e-10).pass);
        assert!(CheckLine::le("b", 0.5, 1.0).pass);
        assert!(!CheckLine::le("b", 2.0, 1.0).pass);
        assert!(!CheckLine::le("b", f64::NAN, 1.0).pass);
        assert!(CheckLine::ge("c", 1.9, 0.9).pass);
        assert!(!CheckLine::ge("c", 0.5, 0.9).pass);
    }

    #[test]
    fn table_and_json_round_trip() {
        let mut rep = CheckReport::new();
        rep.push(CheckLine::eq("pairing", 2.718281828, 2.718281828, 1e-6));
        rep.push(CheckLine::le("defect", 3.0e-3, 1.0e-12).with_note("diagnostic"));
        assert!(!rep.all_pass());
        assert_eq!(rep.failures(), 1);
        let table = rep.render_table();
        assert!(table.contains("FAIL"), "{table}");
        assert!(table.contains("2 checks, 1 failed"), "{table}");
        assert!(table.contains("[diagnostic]"), "{table}");
        let back: CheckReport = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(back.lines.len(), 2);
        assert_eq!(back.lines[1].name, "defect");
        assert!(!back.lines[1].pass);
        // identical content renders identically
        assert_eq!(back.render_table(), table);
        assert_eq!(rep.worst_named("defect"), Some(3.0e-3));
    }
}
