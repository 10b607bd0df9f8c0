//! CSV manifests written by each pipeline stage. Reals use 17 significant
//! digits so readers recover the exact values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset_io::fmt_real;
use crate::error::{Error, Result};
use crate::label::{PseudoLabel, SoftLabel};
use crate::ssl::TraceRow;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    /// A labeled sample, scored to set the threshold.
    Labeled,
    In,
    Out,
}

impl SplitTag {
    fn as_str(self) -> &'static str {
        match self {
            SplitTag::Labeled => "labeled",
            SplitTag::In => "in",
            SplitTag::Out => "out",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "labeled" => Some(SplitTag::Labeled),
            "in" => Some(SplitTag::In),
            "out" => Some(SplitTag::Out),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub id: u64,
    pub sims: Vec<f64>,
    pub score: f64,
    pub split: SplitTag,
}

struct Rows<'a> {
    path: &'a Path,
    reader: csv::Reader<std::fs::File>,
    width: usize,
}

impl<'a> Rows<'a> {
    fn open(
        path: &'a Path,
        fixed: &[&str],
        prefix: Option<&str>,
        trailing: &[&str],
    ) -> Result<(Self, usize)> {
        let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
        let header = reader.headers()?.clone();
        let bad = |msg: String| Error::Malformed {
            path: path.to_path_buf(),
            line: 1,
            msg,
        };
        let extra = header
            .len()
            .checked_sub(fixed.len() + trailing.len())
            .ok_or_else(|| bad("too few columns".into()))?;
        let mut expected: Vec<String> = fixed.iter().map(|s| s.to_string()).collect();
        match prefix {
            Some(p) => expected.extend((1..=extra).map(|i| format!("{p}{i}"))),
            None if extra != 0 => return Err(bad("unexpected columns".into())),
            None => {}
        }
        expected.extend(trailing.iter().map(|s| s.to_string()));
        if header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(bad(format!("expected header {}", expected.join(","))));
        }
        let width = header.len();
        Ok((
            Rows {
                path,
                reader,
                width,
            },
            extra,
        ))
    }

    fn for_each(
        mut self,
        mut f: impl FnMut(&csv::StringRecord, &dyn Fn(String) -> Error) -> Result<()>,
    ) -> Result<()> {
        for rec in self.reader.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let path = self.path;
            let bad = move |msg: String| Error::Malformed {
                path: path.to_path_buf(),
                line,
                msg,
            };
            if rec.len() != self.width {
                return Err(bad(format!(
                    "expected {} fields, got {}",
                    self.width,
                    rec.len()
                )));
            }
            f(&rec, &bad)?;
        }
        Ok(())
    }
}

fn real(field: &str, bad: &dyn Fn(String) -> Error) -> Result<f64> {
    field.parse().map_err(|e| bad(format!("`{field}`: {e}")))
}

fn int<T: std::str::FromStr>(field: &str, bad: &dyn Fn(String) -> Error) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    field.parse().map_err(|e| bad(format!("`{field}`: {e}")))
}

fn opt_real(field: &str, bad: &dyn Fn(String) -> Error) -> Result<Option<f64>> {
    if field.is_empty() {
        Ok(None)
    } else {
        real(field, bad).map(Some)
    }
}

fn width_of(rows: impl Iterator<Item = usize>) -> Result<usize> {
    let mut width = None;
    for w in rows {
        match width {
            None => width = Some(w),
            Some(v) if v != w => {
                return Err(Error::invalid("manifest", "rows have differing widths"))
            }
            _ => {}
        }
    }
    Ok(width.unwrap_or(0))
}

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let c = width_of(rows.iter().map(|r| r.sims.len()))?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_id".to_string()];
    header.extend((1..=c).map(|i| format!("sim_{i}")));
    header.extend(["score".into(), "split".into()]);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.id.to_string()];
        rec.extend(r.sims.iter().map(|&v| fmt_real(v)));
        rec.push(fmt_real(r.score));
        rec.push(r.split.as_str().into());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let (rows, c) = Rows::open(path, &["sample_id"], Some("sim_"), &["score", "split"])?;
    let mut out = Vec::new();
    rows.for_each(|rec, bad| {
        let sims = (1..=c)
            .map(|i| real(&rec[i], bad))
            .collect::<Result<Vec<_>>>()?;
        let split =
            SplitTag::parse(&rec[c + 2]).ok_or_else(|| bad(format!("split `{}`", &rec[c + 2])))?;
        out.push(ScoreRow {
            id: int(&rec[0], bad)?,
            sims,
            score: real(&rec[c + 1], bad)?,
            split,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn write_pseudo_labels(path: &Path, labels: &[PseudoLabel]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample_id", "class", "confidence"])?;
    for p in labels {
        w.write_record([
            p.id.to_string(),
            p.class.to_string(),
            fmt_real(p.confidence),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pseudo_labels(path: &Path) -> Result<Vec<PseudoLabel>> {
    let (rows, _) = Rows::open(path, &["sample_id", "class", "confidence"], None, &[])?;
    let mut out = Vec::new();
    rows.for_each(|rec, bad| {
        out.push(PseudoLabel {
            id: int(&rec[0], bad)?,
            class: int(&rec[1], bad)?,
            confidence: real(&rec[2], bad)?,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn write_soft_labels(path: &Path, labels: &[(u64, SoftLabel)]) -> Result<()> {
    let c = width_of(labels.iter().map(|(_, q)| q.q.len()))?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_id".to_string()];
    header.extend((1..=c).map(|i| format!("q_{i}")));
    w.write_record(&header)?;
    for (id, q) in labels {
        let mut rec = vec![id.to_string()];
        rec.extend(q.q.iter().map(|&v| fmt_real(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_soft_labels(path: &Path) -> Result<Vec<(u64, SoftLabel)>> {
    let (rows, c) = Rows::open(path, &["sample_id"], Some("q_"), &[])?;
    let mut out = Vec::new();
    rows.for_each(|rec, bad| {
        let q = (1..=c)
            .map(|i| real(&rec[i], bad))
            .collect::<Result<Vec<_>>>()?;
        out.push((int(&rec[0], bad)?, SoftLabel { q }));
        Ok(())
    })?;
    Ok(out)
}

pub fn write_pretrain_trace(path: &Path, trace: &[(usize, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss"])?;
    for (step, loss) in trace {
        w.write_record([step.to_string(), fmt_real(*loss)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pretrain_trace(path: &Path) -> Result<Vec<(usize, f64)>> {
    let (rows, _) = Rows::open(path, &["step", "loss"], None, &[])?;
    let mut out = Vec::new();
    rows.for_each(|rec, bad| {
        out.push((int(&rec[0], bad)?, real(&rec[1], bad)?));
        Ok(())
    })?;
    Ok(out)
}

const TRACE_HEADER: [&str; 5] = [
    "step",
    "total_loss",
    "ssl_loss",
    "aux_loss",
    "test_accuracy",
];

/// Empty cells mark an absent aux term or a step without a checkpoint.
pub fn write_train_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRACE_HEADER)?;
    let opt = |v: Option<f64>| v.map(fmt_real).unwrap_or_default();
    for r in trace {
        w.write_record([
            r.step.to_string(),
            fmt_real(r.total),
            fmt_real(r.ssl),
            opt(r.aux),
            opt(r.test_accuracy),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_train_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let (rows, _) = Rows::open(path, &TRACE_HEADER, None, &[])?;
    let mut out = Vec::new();
    rows.for_each(|rec, bad| {
        out.push(TraceRow {
            step: int(&rec[0], bad)?,
            total: real(&rec[1], bad)?,
            ssl: real(&rec[2], bad)?,
            aux: opt_real(&rec[3], bad)?,
            test_accuracy: opt_real(&rec[4], bad)?,
        });
        Ok(())
    })?;
    Ok(out)
}
