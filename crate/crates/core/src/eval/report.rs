//! Line-oriented report format.
//!
//! ```text
//! kind = metrics
//! top1 = 0.8125
//! transition_acc = undefined
//!
//! [table]
//! variant,top1,top3
//! full,0.8125,0.95
//! ```
//!
//! Keys and cells never contain `=`-padded separators, commas or newlines.
//! Undefined values are written as `undefined`.

use std::path::Path;

use super::diagnostics::{collapse_diagnostic, GateHeatmap, Verdict};
use super::latency::LatencyReport;
use super::metrics::{MetricsReport, QUADRANT_NAMES};
use crate::error::{Error, Result};

pub const UNDEFINED: &str = "undefined";
const TABLE_MARK: &str = "[table]";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub kind: String,
    pub fields: Vec<(String, String)>,
    pub table: Option<Table>,
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), fmt_f64)
}

fn bad(what: String) -> Error {
    Error::Format {
        path: "<report>".into(),
        message: what,
    }
}

pub fn parse_f64(s: &str) -> Result<f64> {
    s.parse().map_err(|_| bad(format!("'{s}' is not a number")))
}

pub fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s == UNDEFINED {
        Ok(None)
    } else {
        parse_f64(s).map(Some)
    }
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse().map_err(|_| bad(format!("'{s}' is not a count")))
}

impl Report {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.into(),
            ..Default::default()
        }
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.fields.push((key.into(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| bad(format!("missing key '{key}'")))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("kind = {}\n", self.kind);
        for (k, v) in &self.fields {
            s.push_str(&format!("{k} = {v}\n"));
        }
        if let Some(t) = &self.table {
            s.push('\n');
            s.push_str(TABLE_MARK);
            s.push('\n');
            s.push_str(&t.columns.join(","));
            s.push('\n');
            for r in &t.rows {
                s.push_str(&r.join(","));
                s.push('\n');
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut report = Report::default();
        let mut lines = text.lines();
        let mut kind = None;
        for line in lines.by_ref() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            if line == TABLE_MARK {
                let header = lines.next().ok_or_else(|| bad("table without header".into()))?;
                let columns: Vec<String> = header.split(',').map(String::from).collect();
                let mut rows = Vec::new();
                for row in lines.by_ref() {
                    if row.is_empty() {
                        continue;
                    }
                    let cells: Vec<String> = row.split(',').map(String::from).collect();
                    if cells.len() != columns.len() {
                        return Err(bad(format!("row has {} cells, header has {}", cells.len(), columns.len())));
                    }
                    rows.push(cells);
                }
                report.table = Some(Table { columns, rows });
                break;
            }
            let (k, v) = line.split_once(" = ").ok_or_else(|| bad(format!("malformed line '{line}'")))?;
            if k == "kind" && kind.is_none() {
                kind = Some(v.to_string());
            } else {
                report.fields.push((k.to_string(), v.to_string()));
            }
        }
        report.kind = kind.ok_or_else(|| bad("missing kind".into()))?;
        Ok(report)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.into()),
            _ => Error::io(path, e),
        })?;
        Self::parse(&text)
    }
}

impl MetricsReport {
    pub fn write_fields(&self, r: &mut Report, prefix: &str) {
        r.set(format!("{prefix}top1"), fmt_f64(self.top1));
        r.set(format!("{prefix}top3"), fmt_f64(self.top3));
        r.set(format!("{prefix}transition_acc"), fmt_opt(self.transition_acc));
        r.set(format!("{prefix}n_total"), self.n_total);
        r.set(format!("{prefix}n_transition"), self.n_transition);
        for (q, name) in QUADRANT_NAMES.iter().enumerate() {
            r.set(format!("{prefix}scene_acc.{name}"), fmt_opt(self.scene_acc[q]));
            r.set(format!("{prefix}scene_count.{name}"), self.scene_counts[q]);
        }
    }

    pub fn read_fields(r: &Report, prefix: &str) -> Result<Self> {
        let g = |k: &str| r.get(&format!("{prefix}{k}"));
        let mut scene_acc = [None; 4];
        let mut scene_counts = [0; 4];
        for (q, name) in QUADRANT_NAMES.iter().enumerate() {
            scene_acc[q] = parse_opt(g(&format!("scene_acc.{name}"))?)?;
            scene_counts[q] = parse_usize(g(&format!("scene_count.{name}"))?)?;
        }
        Ok(Self {
            top1: parse_f64(g("top1")?)?,
            top3: parse_f64(g("top3")?)?,
            transition_acc: parse_opt(g("transition_acc")?)?,
            scene_acc,
            scene_counts,
            n_total: parse_usize(g("n_total")?)?,
            n_transition: parse_usize(g("n_transition")?)?,
        })
    }

    pub fn to_report(&self) -> Report {
        let mut r = Report::new("metrics");
        self.write_fields(&mut r, "");
        r
    }

    pub fn from_report(r: &Report) -> Result<Self> {
        Self::read_fields(r, "")
    }
}

impl LatencyReport {
    pub fn write_fields(&self, r: &mut Report, prefix: &str) {
        r.set(format!("{prefix}mode"), self.mode);
        r.set(format!("{prefix}n_warmup"), self.n_warmup);
        r.set(format!("{prefix}n_runs"), self.n_runs);
        r.set(format!("{prefix}batch_size"), self.batch_size);
        r.set(format!("{prefix}mean_ms"), fmt_f64(self.mean_ms));
        r.set(format!("{prefix}median_ms"), fmt_f64(self.median_ms));
        r.set(format!("{prefix}p99_ms"), fmt_f64(self.p99_ms));
        r.set(format!("{prefix}iqr_ms"), fmt_f64(self.iqr_ms));
        r.set(format!("{prefix}jitter_warning"), self.jitter_warning);
    }

    /// Summary fields plus one table row per timed run.
    pub fn to_report(&self) -> Report {
        let mut r = Report::new("latency");
        self.write_fields(&mut r, "");
        let mut t = Table::new(&["run", "ms"]);
        for (i, ms) in self.timings_ms.iter().enumerate() {
            t.rows.push(vec![i.to_string(), fmt_f64(*ms)]);
        }
        r.table = Some(t);
        r
    }

    pub fn from_report(r: &Report) -> Result<Self> {
        let t = r.table.as_ref().ok_or_else(|| bad("latency report without timings".into()))?;
        let timings_ms = t.rows.iter().map(|row| parse_f64(&row[1])).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mode: r.get("mode")?.parse()?,
            n_warmup: parse_usize(r.get("n_warmup")?)?,
            n_runs: parse_usize(r.get("n_runs")?)?,
            batch_size: parse_usize(r.get("batch_size")?)?,
            mean_ms: parse_f64(r.get("mean_ms")?)?,
            median_ms: parse_f64(r.get("median_ms")?)?,
            p99_ms: parse_f64(r.get("p99_ms")?)?,
            iqr_ms: parse_f64(r.get("iqr_ms")?)?,
            jitter_warning: r.get("jitter_warning")? == "true",
            timings_ms,
        })
    }
}

impl GateHeatmap {
    /// Agreement, spread and verdict fields plus the quadrant × expert table.
    pub fn to_report(&self) -> Report {
        let mut r = Report::new("heatmap");
        let (spread, verdict) = collapse_diagnostic(self);
        r.set("agreement", fmt_opt(self.agreement));
        r.set("spread", fmt_f64(spread));
        r.set("verdict", verdict);
        let e = self.n_experts();
        let mut cols = vec!["quadrant".to_string(), "count".to_string()];
        cols.extend((0..e).map(|i| format!("expert{i}")));
        let mut t = Table { columns: cols, rows: Vec::new() };
        for (q, name) in QUADRANT_NAMES.iter().enumerate() {
            let mut row = vec![name.to_string(), self.counts[q].to_string()];
            match &self.rows[q] {
                Some(w) => row.extend(w.iter().map(|v| fmt_f64(*v))),
                None => row.extend((0..e).map(|_| UNDEFINED.to_string())),
            }
            t.rows.push(row);
        }
        r.table = Some(t);
        r
    }

    pub fn from_report(r: &Report) -> Result<(Self, f64, Verdict)> {
        let t = r.table.as_ref().ok_or_else(|| bad("heatmap report without table".into()))?;
        if t.rows.len() != 4 {
            return Err(bad("heatmap needs four quadrant rows".into()));
        }
        let mut counts = [0; 4];
        let mut rows: [Option<Vec<f64>>; 4] = Default::default();
        for (q, row) in t.rows.iter().enumerate() {
            counts[q] = parse_usize(&row[1])?;
            let cells: Vec<Option<f64>> = row[2..].iter().map(|c| parse_opt(c)).collect::<Result<_>>()?;
            rows[q] = cells.into_iter().collect();
        }
        let h = GateHeatmap {
            rows,
            counts,
            agreement: parse_opt(r.get("agreement")?)?,
        };
        Ok((h, parse_f64(r.get("spread")?)?, r.get("verdict")?.parse()?))
    }
}
