//! Report tables and their CSV / JSON renderings.
//!
//! Every pair table has the fixed columns `i,j,theory,mc,se,z,rel_err`; cells
//! that a command does not produce are left empty (CSV) or `null` (JSON).
//! Further tables follow the pair table in CSV, each separated by a blank
//! line and introduced by its own header row.

use std::fmt::Write as _;

use serde_json::value::RawValue;

pub const PAIR_COLUMNS: [&str; 7] = ["i", "j", "theory", "mc", "se", "z", "rel_err"];
pub const COORDINATE_COLUMNS: [&str; 7] = [
    "coordinate",
    "mean",
    "skewness",
    "excess_kurtosis",
    "z_skewness",
    "z_kurtosis",
    "replicas",
];
pub const QUADRATURE_COLUMNS: [&str; 5] = ["i", "j", "exact", "quadrature", "abs_diff"];
pub const MOMENT_COLUMNS: [&str; 8] = ["check", "time_a", "time_b", "estimate", "se", "expected", "z", "flagged"];

/// A table cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Index(u64),
    Number(f64),
    Flag(bool),
    Text(String),
    Empty,
}

impl Cell {
    pub fn opt(x: Option<f64>) -> Self {
        x.map_or(Cell::Empty, Cell::Number)
    }

    fn csv(&self) -> String {
        match self {
            Cell::Index(n) => n.to_string(),
            Cell::Number(x) => format_number(*x),
            Cell::Flag(b) => b.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }

    fn json(&self) -> String {
        match self {
            Cell::Index(n) => n.to_string(),
            Cell::Number(x) if x.is_finite() => format_number(*x),
            Cell::Number(_) | Cell::Empty => "null".into(),
            Cell::Flag(b) => b.to_string(),
            Cell::Text(s) => serde_json::to_string(s).expect("string serialises"),
        }
    }
}

/// 17 significant digits, enough to round-trip any double.
pub fn format_number(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: &'static str,
    pub columns: &'static [&'static str],
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &'static str, columns: &'static [&'static str]) -> Self {
        Self {
            name,
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width for table {}", self.name);
        self.rows.push(row);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub command: &'static str,
    pub config_hash: String,
    pub passed: Option<bool>,
    pub tables: Vec<Table>,
}

impl Report {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, table) in self.tables.iter().enumerate() {
            if k > 0 {
                out.push('\n');
            }
            out.push_str(&table.columns.join(","));
            out.push('\n');
            for row in &table.rows {
                let cells: Vec<String> = row.iter().map(Cell::csv).collect();
                out.push_str(&cells.join(","));
                out.push('\n');
            }
        }
        out
    }

    /// One JSON object: metadata plus one array of row objects per table.
    pub fn to_json(&self) -> String {
        let mut out = String::from("{");
        let _ = write!(out, "\"command\":{}", serde_json::to_string(self.command).unwrap());
        let _ = write!(out, ",\"config_hash\":{}", serde_json::to_string(&self.config_hash).unwrap());
        match self.passed {
            Some(b) => {
                let _ = write!(out, ",\"passed\":{b}");
            }
            None => out.push_str(",\"passed\":null"),
        }
        for table in &self.tables {
            let _ = write!(out, ",{}:[", serde_json::to_string(table.name).unwrap());
            for (r, row) in table.rows.iter().enumerate() {
                if r > 0 {
                    out.push(',');
                }
                out.push('{');
                for (c, (name, cell)) in table.columns.iter().zip(row).enumerate() {
                    if c > 0 {
                        out.push(',');
                    }
                    let _ = write!(out, "{}:{}", serde_json::to_string(name).unwrap(), cell.json());
                }
                out.push('}');
            }
            out.push(']');
        }
        out.push('}');
        let raw = RawValue::from_string(out).expect("report is valid JSON");
        let mut text = raw.get().to_string();
        text.push('\n');
        text
    }
}
