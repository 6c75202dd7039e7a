//! Per-run privacy-cost histories: what every group had spent after every
//! query, where exhaustion struck, and a versioned CSV representation so
//! runs can be archived and compared.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rdp::PrivacyBudget;

/// One group's converted cost after a query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupCost {
    /// Converted (ε, δ)-DP spend so far.
    pub epsilon: f64,
    /// The order that minimized the conversion.
    pub best_alpha: f64,
    /// The accumulated RDP cost at that order.
    pub rdp_at_best: f64,
}

/// Everything recorded about one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query: u32,
    /// Whether the consensus gate passed and an answer was released.
    pub answered: bool,
    /// The released label, when answered.
    pub label: Option<u16>,
    /// Labels produced up to and including this query.
    pub labels_so_far: u32,
    /// Converted costs per group, indexed by group id.
    pub groups: Vec<GroupCost>,
}

/// The first budget violation of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exhaustion {
    pub query: u32,
    /// The smallest-id group whose spend exceeded its budget at `query`.
    pub group: u32,
}

/// A complete voting run: budgets, the per-query cost trail, and the
/// exhaustion point if one was reached. Recording continues past exhaustion
/// (up to the label cap) so histories of different runs stay comparable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostHistory {
    pub budgets: Vec<PrivacyBudget>,
    pub records: Vec<QueryRecord>,
    pub exhaustion: Option<Exhaustion>,
    /// Total labels produced over the whole recording.
    pub produced_labels: u32,
}

impl CostHistory {
    /// Labels produced strictly before the exhaustion query — the usable
    /// output of the run. Without exhaustion, every produced label counts.
    pub fn labels_until_exhaustion(&self) -> u32 {
        match self.exhaustion {
            None => self.produced_labels,
            Some(e) => self
                .records
                .iter()
                .filter(|r| r.query < e.query && r.answered)
                .count() as u32,
        }
    }

    pub fn num_groups(&self) -> usize {
        self.budgets.len()
    }

    /// Serializes as versioned CSV: `#`-prefixed metadata (budgets,
    /// exhaustion, label total), then one long-format row per (query, group).
    pub fn write(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "#ppate-history v1")?;
        for (g, b) in self.budgets.iter().enumerate() {
            writeln!(out, "#budget,group={g},epsilon={},delta={}", b.epsilon, b.delta)?;
        }
        if let Some(e) = self.exhaustion {
            writeln!(out, "#exhaustion,query={},group={}", e.query, e.group)?;
        }
        writeln!(out, "#labels,produced={}", self.produced_labels)?;
        writeln!(
            out,
            "query,group,answered,label,labels_so_far,epsilon_spent,best_alpha,rdp_at_best"
        )?;
        for r in &self.records {
            for (g, c) in r.groups.iter().enumerate() {
                let label = r.label.map(|l| l.to_string()).unwrap_or_default();
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    r.query,
                    g,
                    u8::from(r.answered),
                    label,
                    r.labels_so_far,
                    c.epsilon,
                    c.best_alpha,
                    c.rdp_at_best
                )?;
            }
        }
        Ok(())
    }

    pub fn read(input: &mut impl BufRead) -> Result<Self> {
        let parse_err =
            |line: usize, message: String| Error::Parse { line, message };
        let mut lines = input.lines().enumerate();
        let (_, first) = lines
            .next()
            .ok_or_else(|| parse_err(1, "empty history file".into()))?;
        if first?.trim_end() != "#ppate-history v1" {
            return Err(parse_err(1, "not a ppate-history v1 file".into()));
        }
        let mut budgets = Vec::new();
        let mut exhaustion = None;
        let mut produced_labels = 0u32;
        let mut records: Vec<QueryRecord> = Vec::new();
        let mut saw_columns = false;
        for (i, line) in lines {
            let lineno = i + 1;
            let line = line?;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                let fields: Vec<&str> = meta.split(',').collect();
                match fields[0] {
                    "budget" => {
                        let epsilon = meta_value(&fields, "epsilon")
                            .ok_or_else(|| parse_err(lineno, "budget line missing epsilon".into()))?;
                        let delta = meta_value(&fields, "delta")
                            .ok_or_else(|| parse_err(lineno, "budget line missing delta".into()))?;
                        budgets.push(
                            PrivacyBudget::new(epsilon, delta)
                                .map_err(|e| parse_err(lineno, e.to_string()))?,
                        );
                    }
                    "exhaustion" => {
                        let query = meta_value(&fields, "query")
                            .ok_or_else(|| parse_err(lineno, "exhaustion line missing query".into()))?;
                        let group = meta_value(&fields, "group")
                            .ok_or_else(|| parse_err(lineno, "exhaustion line missing group".into()))?;
                        exhaustion = Some(Exhaustion { query: query as u32, group: group as u32 });
                    }
                    "labels" => {
                        let produced = meta_value(&fields, "produced")
                            .ok_or_else(|| parse_err(lineno, "labels line missing produced".into()))?;
                        produced_labels = produced as u32;
                    }
                    other => {
                        return Err(parse_err(lineno, format!("unknown metadata line {other:?}")));
                    }
                }
                continue;
            }
            if !saw_columns {
                // the single column-header line between metadata and data
                saw_columns = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(parse_err(lineno, format!("expected 8 columns, found {}", f.len())));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| parse_err(lineno, format!("bad number {s:?}")))
            };
            let query = num(f[0])? as u32;
            let group = num(f[1])? as usize;
            let answered = match f[2] {
                "0" => false,
                "1" => true,
                other => return Err(parse_err(lineno, format!("bad answered flag {other:?}"))),
            };
            let label = if f[3].is_empty() {
                None
            } else {
                Some(num(f[3])? as u16)
            };
            let cost = GroupCost {
                epsilon: num(f[5])?,
                best_alpha: num(f[6])?,
                rdp_at_best: num(f[7])?,
            };
            let needs_new = records.last().map_or(true, |r| r.query != query);
            if needs_new {
                if group != 0 {
                    return Err(parse_err(lineno, format!("group rows out of order at query {query}")));
                }
                records.push(QueryRecord {
                    query,
                    answered,
                    label,
                    labels_so_far: num(f[4])? as u32,
                    groups: vec![cost],
                });
            } else {
                let r = records.last_mut().unwrap();
                if group != r.groups.len() {
                    return Err(parse_err(lineno, format!("group rows out of order at query {query}")));
                }
                r.groups.push(cost);
            }
        }
        if budgets.is_empty() {
            return Err(Error::Parse { line: 1, message: "no budget metadata".into() });
        }
        Ok(CostHistory { budgets, records, exhaustion, produced_labels })
    }

    /// Writes atomically via a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut file = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        self.write(&mut file)?;
        file.flush()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        CostHistory::read(&mut file)
    }
}

fn meta_value(fields: &[&str], key: &str) -> Option<f64> {
    fields.iter().find_map(|f| {
        f.strip_prefix(key)
            .and_then(|r| r.strip_prefix('='))
            .and_then(|v| v.parse().ok())
    })
}
