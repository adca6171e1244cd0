//! Results tables in JSON, aligned text and CSV.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Emphasis {
    #[default]
    None,
    /// Best in column.
    Bold,
    /// Second best in column.
    Underline,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    /// `None` renders as `-`.
    pub value: Option<f64>,
    #[serde(default)]
    pub emphasis: Emphasis,
}

impl Cell {
    pub fn number(v: f64) -> Self {
        Self { value: Some(v), emphasis: Emphasis::None }
    }

    pub fn missing() -> Self {
        Self { value: None, emphasis: Emphasis::None }
    }

    fn render(&self) -> String {
        let body = self.value.map_or_else(|| "-".to_string(), |v| v.to_string());
        match self.emphasis {
            Emphasis::None => body,
            Emphasis::Bold => format!("**{body}**"),
            Emphasis::Underline => format!("__{body}__"),
        }
    }

    fn parse(raw: &str) -> Result<Self> {
        let raw = raw.trim();
        let (emphasis, body) = if let Some(b) = raw.strip_prefix("**").and_then(|r| r.strip_suffix("**")) {
            (Emphasis::Bold, b)
        } else if let Some(b) = raw.strip_prefix("__").and_then(|r| r.strip_suffix("__")) {
            (Emphasis::Underline, b)
        } else {
            (Emphasis::None, raw)
        };
        let value = if body == "-" {
            None
        } else {
            Some(body.parse::<f64>().map_err(|_| Error::Corrupt(format!("table cell `{raw}` is not a number")))?)
        };
        Ok(Self { value, emphasis })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub cells: Vec<Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub caption: String,
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableFormat {
    Json,
    Text,
    Csv,
}

impl FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "text" | "txt" => Ok(Self::Text),
            "csv" => Ok(Self::Csv),
            other => Err(Error::Config(format!("unknown table format `{other}`"))),
        }
    }
}

impl ResultsTable {
    pub fn new(caption: impl Into<String>, columns: Vec<String>) -> Self {
        Self { caption: caption.into(), columns, rows: Vec::new() }
    }

    pub fn push_row(&mut self, label: impl Into<String>, cells: Vec<Cell>) -> Result<()> {
        let row = TableRow { label: label.into(), cells };
        self.check_row(&row)?;
        self.rows.push(row);
        Ok(())
    }

    fn check_row(&self, row: &TableRow) -> Result<()> {
        if row.cells.len() != self.columns.len() {
            return Err(Error::Dimension(format!(
                "row `{}` has {} cells for {} columns",
                row.label,
                row.cells.len(),
                self.columns.len()
            )));
        }
        if row.cells.iter().any(|c| c.value.is_some_and(|v| !v.is_finite())) {
            return Err(Error::Numeric(format!("row `{}`", row.label)));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.rows.iter().try_for_each(|r| self.check_row(r))
    }

    /// Append a column holding each row's mean over `over`; rows with a
    /// missing cell there get `-`.
    pub fn add_mean_column(&mut self, name: impl Into<String>, over: &[usize]) -> Result<()> {
        if over.is_empty() || over.iter().any(|&i| i >= self.columns.len()) {
            return Err(Error::Index(format!("mean columns {over:?} out of range")));
        }
        for row in &mut self.rows {
            let vals: Option<Vec<f64>> = over.iter().map(|&i| row.cells[i].value).collect();
            let cell = vals.map_or_else(Cell::missing, |v| Cell::number(v.iter().sum::<f64>() / v.len() as f64));
            row.cells.push(cell);
        }
        self.columns.push(name.into());
        Ok(())
    }

    /// Bold the largest and underline the second largest value in each column.
    pub fn mark_best(&mut self) {
        for c in 0..self.columns.len() {
            let mut vals: Vec<(f64, usize)> =
                self.rows.iter().enumerate().filter_map(|(i, r)| r.cells[c].value.map(|v| (v, i))).collect();
            vals.sort_by(|a, b| b.0.total_cmp(&a.0));
            for (rank, &(_, i)) in vals.iter().take(2).enumerate() {
                self.rows[i].cells[c].emphasis = if rank == 0 { Emphasis::Bold } else { Emphasis::Underline };
            }
        }
    }

    pub fn emit(&self, format: TableFormat) -> Result<Vec<u8>> {
        self.validate()?;
        Ok(match format {
            TableFormat::Json => serde_json::to_vec_pretty(self)?,
            TableFormat::Text => self.text().into_bytes(),
            TableFormat::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                let header: Vec<&str> = std::iter::once(self.caption.as_str()).chain(self.columns.iter().map(String::as_str)).collect();
                w.write_record(&header).map_err(csv_err)?;
                for row in &self.rows {
                    let rec: Vec<String> = std::iter::once(row.label.clone()).chain(row.cells.iter().map(Cell::render)).collect();
                    w.write_record(&rec).map_err(csv_err)?;
                }
                w.into_inner().map_err(|e| Error::Io(e.into_error()))?
            }
        })
    }

    fn text(&self) -> String {
        let mut grid: Vec<Vec<String>> = vec![std::iter::once(String::new()).chain(self.columns.iter().cloned()).collect()];
        for row in &self.rows {
            grid.push(std::iter::once(row.label.clone()).chain(row.cells.iter().map(Cell::render)).collect());
        }
        let widths: Vec<usize> =
            (0..grid[0].len()).map(|j| grid.iter().map(|r| r[j].chars().count()).max().unwrap_or(0)).collect();
        let line = |r: &[String]| {
            r.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect::<Vec<_>>().join(" | ").trim_end().to_string()
        };
        let mut out = format!("{}\n{}\n", self.caption, line(&grid[0]));
        let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
        for r in &grid[1..] {
            let _ = writeln!(out, "{}", line(r));
        }
        out
    }

    pub fn parse(bytes: &[u8], format: TableFormat) -> Result<Self> {
        let table = match format {
            TableFormat::Json => serde_json::from_slice(bytes)?,
            TableFormat::Text => Self::parse_text(&String::from_utf8_lossy(bytes))?,
            TableFormat::Csv => {
                let mut r = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(bytes);
                let mut records = r.records();
                let header = records.next().ok_or_else(|| Error::Corrupt("empty table".into()))?.map_err(csv_err)?;
                let mut t = Self::new(&header[0], header.iter().skip(1).map(str::to_string).collect());
                for rec in records {
                    let rec = rec.map_err(csv_err)?;
                    let cells = rec.iter().skip(1).map(Cell::parse).collect::<Result<Vec<_>>>()?;
                    t.push_row(&rec[0], cells)?;
                }
                t
            }
        };
        table.validate()?;
        Ok(table)
    }

    fn parse_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let caption = lines.next().ok_or_else(|| Error::Corrupt("empty table".into()))?;
        let split = |l: &str| l.split(" | ").map(|s| s.trim().to_string()).collect::<Vec<_>>();
        let header = split(lines.next().ok_or_else(|| Error::Corrupt("table has no header".into()))?);
        lines.next();
        let mut t = Self::new(caption, header.into_iter().skip(1).collect());
        for l in lines.filter(|l| !l.trim().is_empty()) {
            let f = split(l);
            let cells = f.iter().skip(1).map(|c| Cell::parse(c)).collect::<Result<Vec<_>>>()?;
            t.push_row(&f[0], cells)?;
        }
        Ok(t)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Corrupt(format!("table csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    const FORMATS: [TableFormat; 3] = [TableFormat::Json, TableFormat::Text, TableFormat::Csv];

    #[test]
    fn one_by_one_round_trips() {
        let mut t = ResultsTable::new("tiny", vec!["a".into()]);
        t.push_row("r", vec![Cell::number(0.1 + 0.2)]).unwrap();
        for f in FORMATS {
            assert_eq!(ResultsTable::parse(&t.emit(f).unwrap(), f).unwrap(), t, "{f:?}");
        }
    }

    #[test]
    fn distortion_table_average_and_marks() {
        let cols = ["Trad.", "CNN", "SR", "Deblur", "Color", "Interp."].map(String::from).to_vec();
        let mut t = ResultsTable::new("2AFC accuracy", [cols, vec!["CLIC".into()]].concat());
        let rows = [
            ("L2", [59.9, 77.8, 64.7, 58.2, 63.5, 62.3, 60.1]),
            ("SSIM", [62.7, 77.5, 63.1, 58.5, 61.4, 62.7, 65.0]),
            ("CPIPS", [70.1, 81.2, 69.7, 60.0, 64.6, 63.8, 72.3]),
        ];
        for (l, v) in rows {
            t.push_row(l, v.iter().map(|&x| Cell::number(x)).collect()).unwrap();
        }
        t.rows[1].cells[6] = Cell::missing();
        t.add_mean_column("Avg", &[0, 1, 2, 3, 4, 5]).unwrap();
        t.mark_best();
        for (r, (_, v)) in t.rows.iter().zip(rows) {
            let mean = v[..6].iter().sum::<f64>() / 6.0;
            assert!((r.cells[7].value.unwrap() - mean).abs() < 1e-9);
        }
        assert_eq!(t.rows[2].cells[7].emphasis, Emphasis::Bold);
        for f in FORMATS {
            assert_eq!(ResultsTable::parse(&t.emit(f).unwrap(), f).unwrap(), t, "{f:?}");
        }
        let text = String::from_utf8(t.emit(TableFormat::Text).unwrap()).unwrap();
        let bars: Vec<Vec<usize>> =
            text.lines().skip(1).filter(|l| !l.starts_with('-')).map(|l| l.match_indices(" | ").map(|(i, _)| i).collect()).collect();
        assert!(bars.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn rejects_ragged_and_nonfinite() {
        let mut t = ResultsTable::new("x", vec!["a".into(), "b".into()]);
        assert!(t.push_row("r", vec![Cell::number(1.0)]).is_err());
        assert!(t.push_row("r", vec![Cell::number(1.0), Cell::number(f64::NAN)]).is_err());
    }
}
