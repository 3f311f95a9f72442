//! Dataset manifests: one CSV record per patch (or per ground-truth cell),
//! preceded by `#`-comment lines carrying the class table and channel order.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{parse_channel_list, Channel};

pub const HEADER: [&str; 10] = [
    "path", "label", "group", "cx", "cy", "area", "circ", "shift_dx", "shift_dy", "threshold",
];
pub const TRUTH_HEADER: [&str; 3] = ["true_cx", "true_cy", "radius"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Truth {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub path: String,
    pub label: String,
    pub group: String,
    pub cx: f64,
    pub cy: f64,
    pub area: usize,
    pub circularity: f64,
    pub shift_dx: i32,
    pub shift_dy: i32,
    pub threshold: f64,
    pub truth: Option<Truth>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub channels: Vec<Channel>,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn new(classes: Vec<String>, channels: Vec<Channel>) -> Self {
        Self {
            classes,
            channels,
            rows: Vec::new(),
        }
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    /// Integer class id per row.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.rows
            .iter()
            .map(|r| {
                self.class_index(&r.label)
                    .ok_or_else(|| Error::Data(format!("{}: label '{}' not in class table", r.path, r.label)))
            })
            .collect()
    }

    pub fn groups(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.group.clone()).collect()
    }

    /// Checks labels against the class table, non-empty groups and unique paths.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut paths = BTreeSet::new();
        for (i, r) in self.rows.iter().enumerate() {
            if self.class_index(&r.label).is_none() {
                problems.push(format!("row {i}: label '{}' not in class table", r.label));
            }
            if r.group.is_empty() {
                problems.push(format!("row {i}: empty group"));
            }
            if !paths.insert(r.path.as_str()) {
                problems.push(format!("row {i}: duplicate path {}", r.path));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Data(problems.join("; ")))
        }
    }

    pub fn has_truth(&self) -> bool {
        self.rows.iter().any(|r| r.truth.is_some())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# classes={}\n", self.classes.join(",")));
        let channels: Vec<&str> = self.channels.iter().map(|c| c.name()).collect();
        out.push_str(&format!("# channels={}\n", channels.join(",")));
        let truth = self.has_truth();
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        let mut header: Vec<&str> = HEADER.to_vec();
        if truth {
            header.extend(TRUTH_HEADER);
        }
        w.write_record(&header).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![
                r.path.clone(),
                r.label.clone(),
                r.group.clone(),
                r.cx.to_string(),
                r.cy.to_string(),
                r.area.to_string(),
                r.circularity.to_string(),
                r.shift_dx.to_string(),
                r.shift_dy.to_string(),
                r.threshold.to_string(),
            ];
            if truth {
                match r.truth {
                    Some(t) => rec.extend([t.cx.to_string(), t.cy.to_string(), t.radius.to_string()]),
                    None => rec.extend([String::new(), String::new(), String::new()]),
                }
            }
            w.write_record(&rec).expect("in-memory write");
        }
        out.push_str(&String::from_utf8(w.into_inner().expect("flushed")).expect("utf8 fields"));
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let ctx = "manifest";
        let mut classes = Vec::new();
        let mut channels = Vec::new();
        for line in text.lines().take_while(|l| l.starts_with('#')) {
            let body = line.trim_start_matches('#').trim();
            if let Some(v) = body.strip_prefix("classes=") {
                classes = v.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect();
            } else if let Some(v) = body.strip_prefix("channels=") {
                channels = parse_channel_list(v)?;
            }
        }
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let header = rdr.headers().map_err(|e| Error::format(ctx, e.to_string()))?.clone();
        let cols: Vec<&str> = header.iter().collect();
        if cols.len() < HEADER.len() || cols[..HEADER.len()] != HEADER {
            return Err(Error::format(ctx, format!("unexpected header {cols:?}")));
        }
        let truth = cols.len() >= HEADER.len() + 3 && cols[HEADER.len()..HEADER.len() + 3] == TRUTH_HEADER;
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::format(ctx, e.to_string()))?;
            let field = |k: usize| rec.get(k).unwrap_or("");
            let num = |k: usize| -> Result<f64> {
                field(k)
                    .parse::<f64>()
                    .map_err(|_| Error::format(ctx, format!("row {i}: bad {} '{}'", cols[k], field(k))))
            };
            let int = |k: usize| -> Result<i64> {
                field(k)
                    .parse::<i64>()
                    .map_err(|_| Error::format(ctx, format!("row {i}: bad {} '{}'", cols[k], field(k))))
            };
            let truth = if truth && !field(10).is_empty() {
                Some(Truth {
                    cx: num(10)?,
                    cy: num(11)?,
                    radius: num(12)?,
                })
            } else {
                None
            };
            rows.push(ManifestRow {
                path: field(0).to_string(),
                label: field(1).to_string(),
                group: field(2).to_string(),
                cx: num(3)?,
                cy: num(4)?,
                area: int(5)?.max(0) as usize,
                circularity: num(6)?,
                shift_dx: int(7)? as i32,
                shift_dy: int(8)? as i32,
                threshold: num(9)?,
                truth,
            });
        }
        if classes.is_empty() {
            let set: BTreeSet<&str> = rows.iter().map(|r| r.label.as_str()).collect();
            classes = set.into_iter().map(str::to_string).collect();
        }
        Ok(Self { classes, channels, rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}
