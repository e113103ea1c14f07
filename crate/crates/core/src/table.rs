//! Comma-separated tables with a leading `#`-comment metadata block.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    /// `# key: value` lines, in order.
    pub metadata: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:?}")
    }
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Self {
            metadata: Vec::new(),
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.push((key.to_string(), value.to_string()));
        self
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::Validation(format!(
                "row has {} cells, table has {} columns",
                row.len(),
                self.columns.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Cell as `f64`.
    pub fn value(&self, row: usize, name: &str) -> Result<f64> {
        let c = self
            .column(name)
            .ok_or_else(|| Error::Parse(format!("no column '{name}'")))?;
        let cell = &self.rows[row][c];
        cell.parse::<f64>()
            .map_err(|_| Error::Parse(format!("cell '{cell}' in column '{name}' is not a number")))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['\n', ':']) || v.contains('\n') {
                return Err(Error::Validation(format!("metadata entry '{k}' is not single-line")));
            }
            let _ = writeln!(out, "# {k}: {v}");
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).map_err(|e| Error::Parse(e.to_string()))?;
        for r in &self.rows {
            w.write_record(r).map_err(|e| Error::Parse(e.to_string()))?;
        }
        let body = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        out.push_str(&String::from_utf8(body).map_err(|e| Error::Parse(e.to_string()))?);
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut metadata = Vec::new();
        let mut body_start = 0;
        for line in text.split_inclusive('\n') {
            let Some(rest) = line.strip_prefix('#') else { break };
            body_start += line.len();
            let rest = rest.trim_end_matches(['\n', '\r']).trim_start();
            let (k, v) = rest
                .split_once(": ")
                .or_else(|| rest.strip_suffix(':').map(|k| (k, "")))
                .ok_or_else(|| Error::Parse(format!("bad metadata line '{rest}'")))?;
            metadata.push((k.to_string(), v.to_string()));
        }
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text[body_start..].as_bytes());
        let columns = r
            .headers()
            .map_err(|e| Error::Parse(e.to_string()))?
            .iter()
            .map(String::from)
            .collect::<Vec<_>>();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
            rows.push(rec.iter().map(String::from).collect());
        }
        Ok(Self {
            metadata,
            columns,
            rows,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn metadata_and_rows_survive() {
        let mut t = Table::new(["alpha", "eps_g"]).meta("tool", "seqmi 0.1.0").meta("seeds", "0,1,2");
        t.push(vec!["0.5".into(), fmt_f64(0.1 + 0.2)]).unwrap();
        t.push(vec!["1".into(), "NaN".into()]).unwrap();
        let back = Table::parse(&t.to_csv().unwrap()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.value(0, "eps_g").unwrap(), 0.1 + 0.2);
        assert!(back.value(1, "eps_g").unwrap().is_nan());
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let mut t = Table::new(["a", "b"]);
        assert!(t.push(vec!["1".into()]).is_err());
    }

    proptest! {
        #[test]
        fn float_cells_round_trip(xs in proptest::collection::vec(any::<f64>(), 1..20), note in "[a-z ,\"]{0,12}") {
            let mut t = Table::new(["x", "note"]).meta("hash", "abc");
            for x in &xs {
                t.push(vec![fmt_f64(*x), note.clone()]).unwrap();
            }
            let back = Table::parse(&t.to_csv().unwrap()).unwrap();
            prop_assert_eq!(&back, &t);
            for (i, x) in xs.iter().enumerate() {
                let y = back.value(i, "x").unwrap();
                prop_assert!(y == *x || (y.is_nan() && x.is_nan()));
            }
        }
    }
}
